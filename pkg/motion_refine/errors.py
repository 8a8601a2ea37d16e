from typing import Optional


class MotionRefineError(Exception):
    """Base class of every error raised by motion_refine"""

    def context(self) -> dict:
        return {}


class InvalidArgumentError(MotionRefineError, ValueError):
    pass


class SequenceTooShortError(InvalidArgumentError):
    def __init__(self, what: str, required: int, actual: int):
        super().__init__(
            f"sequence too short for {what}: needs at least {required} frames, got {actual}"
        )
        self.what = what
        self.required = required
        self.actual = actual

    def context(self):
        return {"required": self.required, "actual": self.actual}


class BehindCameraError(InvalidArgumentError):
    def __init__(self, frame: int, joint: Optional[int], depth: float):
        super().__init__(
            f"point behind camera at frame {frame}, joint {joint} (depth {depth:.3g} m)"
        )
        self.frame = frame
        self.joint = joint
        self.depth = depth

    def context(self):
        return {"frame": self.frame, "joint": self.joint, "depth": self.depth}


class FileFormatError(InvalidArgumentError):
    def __init__(self, field: str, message: str, path=None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}field '{field}': {message}")
        self.field = field
        self.path = path

    def context(self):
        return {"field": self.field, "path": None if self.path is None else str(self.path)}


class PredictionsParseError(FileFormatError):
    pass


class DivergedError(MotionRefineError, ArithmeticError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"energy became non-finite ({value}) at epoch {epoch}")
        self.epoch = epoch
        self.value = value

    def context(self):
        return {"epoch": self.epoch}
