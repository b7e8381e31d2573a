"""Forward-mode AD driven affine registration and variable-projection super-resolution."""

__version__ = "0.1.0"
