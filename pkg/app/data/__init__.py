"""Dataset ingestion and PPM image files."""

from app.data.datasets import Dataset, load_dataset, synthetic_blobs
from app.data.ppm import image_grid, read_ppm, write_ppm

__all__ = ["Dataset", "image_grid", "load_dataset", "read_ppm", "synthetic_blobs", "write_ppm"]
