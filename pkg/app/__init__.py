# Featvis circuit lab: feature visualizations, SNIP circuits and the attacks that fool them
