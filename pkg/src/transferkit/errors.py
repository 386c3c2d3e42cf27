"""Exception hierarchy shared by every transferkit module."""


class TransferKitError(Exception):
    """Base class; the CLI maps any subclass to exit code 1."""


class ConfigError(TransferKitError):
    def __init__(self, message, section=None, key=None):
        super().__init__(message)
        self.section = section
        self.key = key


class LayoutError(TransferKitError):
    pass


class TaskError(TransferKitError):
    pass


class DataError(TransferKitError):
    pass


class BackboneError(TransferKitError):
    pass


class AssemblyError(TransferKitError):
    pass


class FreezePolicyError(TransferKitError):
    pass


class TrainingError(TransferKitError):
    pass


class EvaluationError(TransferKitError):
    pass


class ExportError(TransferKitError):
    pass
