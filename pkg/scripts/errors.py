"""Error types shared by every engine in the package.

Library code raises these; only ``main_cli.py`` turns them into
``ERROR: ...`` lines and exit codes.
"""


class KasautiError(Exception):
    """Base class for all errors raised by the search engine."""


class ShapeError(KasautiError):
    def __init__(self, primitive, shape_a, shape_b=None):
        self.primitive = primitive
        self.shape_a = tuple(shape_a)
        self.shape_b = None if shape_b is None else tuple(shape_b)
        if shape_b is None:
            msg = f"{primitive}: unsupported shape {self.shape_a}"
        else:
            msg = f"{primitive}: shapes {self.shape_a} and {self.shape_b} are not conformable"
        super().__init__(msg)

    def __reduce__(self):
        return type(self), (self.primitive, self.shape_a, self.shape_b)


class NonFiniteError(KasautiError):
    def __init__(self, primitive, where=None):
        self.primitive = primitive
        self.where = where
        msg = f"non-finite value produced by {primitive}"
        if where:
            msg += f" in {where}"
        super().__init__(msg)

    def __reduce__(self):
        return type(self), (self.primitive, self.where)


class TapeError(KasautiError):
    pass


class PruneError(KasautiError):
    pass


class StarvedNodeError(KasautiError):
    def __init__(self, nodes):
        self.nodes = list(nodes)
        super().__init__(f"no alive signal reaches node(s) {self.nodes}")

    def __reduce__(self):
        return type(self), (self.nodes,)


class GenotypeError(KasautiError):
    pass


class BudgetError(KasautiError):
    pass


class ConfigError(KasautiError):
    pass


class OracleError(KasautiError):
    pass


class EvaluatorError(KasautiError):
    pass


class SearchError(KasautiError):
    """A search aborted part-way; ``trace`` holds the steps completed so far."""

    def __init__(self, message, trace):
        self.trace = trace
        super().__init__(message)

    # rebuilt in the parent when raised inside a worker process
    def __reduce__(self):
        return type(self), (str(self), self.trace)
