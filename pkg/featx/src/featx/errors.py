"""Error taxonomy. The CLI maps ConfigError to exit 2 and DataError to 3,
matching the conventions of the engine this package feeds."""


class FeatxError(Exception):
    pass


class ConfigError(FeatxError):
    """A request that can never work: bad flag values, wrong file kind."""


class DataError(FeatxError):
    """Inputs that should exist or parse but do not."""


class ManifestError(DataError):
    pass


class ModelDirError(DataError):
    pass
