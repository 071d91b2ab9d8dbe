"""Pipeline commands behind the CLI verbs."""

from app.commands.pipeline_commands import (
    cmd_attack,
    cmd_discover,
    cmd_evaluate,
    cmd_export,
    cmd_featvis,
    cmd_train,
)

__all__ = ["cmd_attack", "cmd_discover", "cmd_evaluate", "cmd_export", "cmd_featvis", "cmd_train"]
