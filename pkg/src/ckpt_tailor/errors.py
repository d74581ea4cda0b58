"""Exception hierarchy shared by every part of the toolkit."""


class TailorError(Exception):
    """Base class. Anything derived from it is a user-facing error (CLI exit 1)."""


class InvalidModule(TailorError):
    pass


class GeometryError(TailorError):
    pass


class NonFiniteError(TailorError):
    pass


class StorageError(TailorError):
    pass


class MissingArtifact(TailorError):
    def __init__(self, path, detail=""):
        self.path = str(path)
        msg = f"missing artifact: {self.path}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


class CorruptContainer(TailorError):
    pass


class RecipeError(TailorError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class SourceLacksModule(TailorError):
    def __init__(self, module, path):
        self.module = module
        self.path = str(path)
        super().__init__(f"source checkpoint {self.path} does not contain {module}")


class UnrecoverableModule(TailorError):
    def __init__(self, modules):
        self.modules = list(modules)
        names = ", ".join(str(m) for m in self.modules)
        super().__init__(f"never saved before the failure step: {names}")


class MissingModules(TailorError):
    def __init__(self, modules, path=None):
        self.modules = list(modules)
        names = ", ".join(str(m) for m in self.modules)
        where = f" in {path}" if path is not None else ""
        super().__init__(
            f"checkpoint{where} is partial, missing: {names}; "
            "build a complete checkpoint with `plan` + `merge` first"
        )


class ConsistencyError(Exception):
    """Internal invariant violation. Deliberately not a TailorError (CLI exit 2)."""
