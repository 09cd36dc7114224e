# ==================================================
# File: errors.py
# Exception hierarchy for the slide representation pipeline
# ==================================================

from pathlib import Path
from typing import Optional, Union


class DrslError(Exception):
    """Base class for every error raised by the pipeline"""


class ConfigError(DrslError, ValueError):
    """Invalid or inconsistent configuration"""


class DimensionError(DrslError, ValueError):
    """Shape or dimension mismatch"""

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class InputError(DrslError, ValueError):
    """Malformed input (duplicate indices, out-of-range targets, ...)"""


class TargetIndexError(InputError, IndexError):
    pass


class FormatError(DrslError):
    """Corrupted or foreign binary file"""

    def __init__(self, message: str, offset: int = 0, path: Optional[Union[str, Path]] = None):
        where = f" ({path})" if path else ""
        super().__init__(f"{message} at byte {offset}{where}")
        self.offset = offset
        self.path = path


class MissingSlideError(DrslError, KeyError):
    def __init__(self, slide_id: str):
        super().__init__(f"unknown slide: {slide_id!r}")
        self.slide_id = slide_id

    def __str__(self):
        return self.args[0]


class LoadError(DrslError, OSError):
    """Dataset could not be loaded"""

    def __init__(self, message: str, slide_id: Optional[str] = None, path: Optional[Union[str, Path]] = None):
        context = []
        if slide_id is not None:
            context.append(f"slide={slide_id}")
        if path is not None:
            context.append(f"path={path}")
        suffix = f" [{', '.join(context)}]" if context else ""
        super().__init__(f"{message}{suffix}")
        self.slide_id = slide_id
        self.path = path

    def __str__(self):
        return self.args[0]


class SplitError(DrslError, ValueError):
    pass


class MetricError(DrslError, ValueError):
    pass


class NonFiniteError(DrslError, FloatingPointError):
    def __init__(self, message: str, node_id: Optional[int] = None):
        if node_id is not None:
            message = f"{message} (node {node_id})"
        super().__init__(message)
        self.node_id = node_id


class GradientCheckError(DrslError):
    pass


class MissingArtifactError(DrslError, OSError):
    """A prerequisite artifact is absent from the output directory"""

    def __init__(self, path: Union[str, Path], producer: str):
        super().__init__(f"missing {path}; run `{producer}` first")
        self.path = Path(path)
        self.producer = producer

    def __str__(self):
        return self.args[0]
