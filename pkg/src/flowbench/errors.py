"""Exception hierarchy shared by every flowbench module."""


class FlowbenchError(Exception):
    """Base class; the CLI turns these into machine-readable stderr records."""

    code = "flowbench_error"


class InvalidPose(FlowbenchError):
    code = "invalid_pose"


class MalformedAnnotations(FlowbenchError):
    code = "malformed_annotations"


class InvalidScene(FlowbenchError):
    code = "invalid_scene"


class EmptyInput(FlowbenchError):
    code = "empty_input"


class IncompatibleRate(FlowbenchError):
    code = "incompatible_rate"


class ManifestMismatch(FlowbenchError):
    code = "manifest_mismatch"


class UnmappedClass(FlowbenchError):
    code = "unmapped_class"


class FormatError(FlowbenchError):
    code = "format_error"


class InvalidWeights(FlowbenchError):
    code = "invalid_weights"


class UnknownDataset(FlowbenchError):
    code = "unknown_dataset"


class EmptyDataset(FlowbenchError):
    code = "empty_dataset"


class ShapeError(FlowbenchError):
    code = "shape_error"


class InvalidSpeed(FlowbenchError):
    code = "invalid_speed"


class ConfigMismatch(FlowbenchError):
    code = "config_mismatch"


class InvalidGrid(FlowbenchError):
    code = "invalid_grid"


class MisalignedExtension(FlowbenchError):
    code = "misaligned_extension"


class NotAnExtension(FlowbenchError):
    code = "not_an_extension"


class InvalidConfig(FlowbenchError):
    code = "invalid_config"
