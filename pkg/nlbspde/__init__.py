from nlbspde.version import __version__  # noqa: F401
