"""Exception hierarchy. CLI exit codes map onto these classes."""


class InctkgError(Exception):
    exit_code = 1


class ConfigError(InctkgError, ValueError):
    exit_code = 2


class DataError(InctkgError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class DivergenceError(InctkgError, ArithmeticError):
    exit_code = 4
