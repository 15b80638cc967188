"""Extreme eigenvalues of correlated Wishart matrices and their Tracy-Widom limits."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
