"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConsistencyError(ValueError):
    """Inputs violate a cross-object contract (keys, architectures, indices)."""


class FormatError(ValueError):
    """A binary file has the wrong magic, version or layout."""


class MeshError(ValueError):
    """A mesh is degenerate or non-conforming."""


class GraphMismatchError(ValueError):
    """Trajectories, checkpoints or masks refer to graphs of different size."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""
