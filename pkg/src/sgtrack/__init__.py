"""Ray-cast correspondence tracking of mesh objects in a geometric scene graph."""

__version__ = "0.1.0"
