"""Exception types. Each maps onto a CLI exit code."""


class CamoError(Exception):
    exit_code = 1


class ConfigError(CamoError):
    exit_code = 2


class DataError(CamoError):
    exit_code = 3


class CheckpointError(CamoError):
    exit_code = 4
