"""Typed errors raised across the flow engine.

Every error carries the name of the module that owns the violated
precondition so the command line can report it.
"""


class FlowEngineError(ValueError):
    """Base class for all engine errors"""

    module = "engine"

    def __init__(self, message, module=None):
        super().__init__(message)
        if module is not None:
            self.module = module


class CoreError(FlowEngineError):
    module = "core"


class NetError(FlowEngineError):
    module = "net"


class LossError(FlowEngineError):
    module = "loss"


class SamplerError(FlowEngineError):
    module = "sampler"


class NNFError(FlowEngineError):
    module = "nnf"


class DensifyError(FlowEngineError):
    module = "densify"


class EvalError(FlowEngineError):
    module = "eval"


class BenchError(FlowEngineError):
    module = "mnist_bench"


class ConfigError(FlowEngineError):
    module = "cli"


class DataFormatError(FlowEngineError):
    module = "data_io"


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class DimensionOverflowError(DataFormatError):
    pass


class SizeMismatchError(DataFormatError):
    pass


class ImageFormatError(DataFormatError):
    pass
