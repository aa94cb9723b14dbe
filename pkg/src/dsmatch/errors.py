"""Exception types shared across the toolkit."""


class DsmatchError(Exception):
    """Base class for all toolkit errors."""


class DegenerateGridError(DsmatchError):
    """Raised when a grid or mesh has too little structure to triangulate."""


class RankDeficientError(DsmatchError):
    """Raised when the normal equations are singular or near-singular."""


class NoCorrespondencesError(DsmatchError):
    """Raised when too few valid correspondences remain to proceed."""


class InvalidPolygonError(DsmatchError):
    """Raised for mask polygons with fewer than 3 vertices or self-intersections."""
