from .runtime import (  # noqa: F401
    ControllerProgram,
    ControllerInstance,
    EmaState,
    EpisodeAbort,
    ValidationError,
    controller_step,
    validate,
)
from .templates import default_controller  # noqa: F401
