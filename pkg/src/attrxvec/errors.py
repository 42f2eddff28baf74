"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class AttrxvecError(Exception):
    exit_code = 2


class ConfigError(AttrxvecError):
    exit_code = 1


class DataError(AttrxvecError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.path = path
        self.line = line


class FormatError(DataError):
    """Artifact with a wrong magic, version, or content hash."""


class NumericError(AttrxvecError):
    exit_code = 3
