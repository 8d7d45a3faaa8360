"""Interval meshes, structured triangulations, and observation-subdomain masks.

Supports exactly the geometry the solvers need: 1D intervals split into equal
segments and axis-aligned rectangles covered by a structured triangular grid
(each cell split along the lower-left to upper-right diagonal, fixed for
determinism).  Observation subdomains are unions of axis-aligned boxes; nodes
on a box boundary count as inside (closure convention), an element is flagged
only when all of its vertices are.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mesh",
    "SubdomainMask",
    "build_interval_mesh",
    "build_rect_mesh",
    "mask_from_boxes",
    "erode_mask",
    "export_mesh_csv",
]


@dataclass(frozen=True)
class Mesh:
    """Nodal geometry plus element connectivity.

    Parameters
    ----------
    dim:
        1 for intervals, 2 for rectangles.
    nodes:
        ``(n_nodes,)`` array of coordinates in 1D, ``(n_nodes, 2)`` in 2D.
    elements:
        ``(n_elems, 2)`` segment or ``(n_elems, 3)`` triangle node indices.
    boundary_nodes:
        Sorted indices of nodes on the domain boundary.
    """

    dim: int
    nodes: np.ndarray
    elements: np.ndarray
    boundary_nodes: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=float))
        object.__setattr__(self, "elements", np.asarray(self.elements, dtype=np.int64))
        object.__setattr__(self, "boundary_nodes", np.asarray(self.boundary_nodes, dtype=np.int64))
        if self.elements.size and self.elements.max() >= self.node_count:
            raise ValueError("element refers to a node index out of range")
        measures = self.element_measures()
        if np.any(measures <= 0.0):
            raise ValueError("mesh contains a degenerate element")

    @property
    def node_count(self) -> int:
        return self.nodes.shape[0]

    @property
    def element_count(self) -> int:
        return self.elements.shape[0]

    @property
    def interior_nodes(self) -> np.ndarray:
        """Indices of nodes not on the Dirichlet boundary."""
        mask = np.ones(self.node_count, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.nonzero(mask)[0]

    def coords(self) -> np.ndarray:
        """Node coordinates as an ``(n_nodes, dim)`` array (also in 1D)."""
        if self.dim == 1:
            return self.nodes.reshape(-1, 1)
        return self.nodes

    def element_measures(self) -> np.ndarray:
        """Length (1D) or area (2D) of every element."""
        if self.dim == 1:
            a = self.nodes[self.elements[:, 0]]
            b = self.nodes[self.elements[:, 1]]
            return b - a
        p0 = self.nodes[self.elements[:, 0]]
        p1 = self.nodes[self.elements[:, 1]]
        p2 = self.nodes[self.elements[:, 2]]
        cross = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
        return 0.5 * np.abs(cross)

    def domain_measure(self) -> float:
        return float(self.element_measures().sum())


@dataclass(frozen=True)
class SubdomainMask:
    """Node / element flags for an observation subdomain O given by boxes."""

    node_flags: np.ndarray
    element_flags: np.ndarray
    boxes: tuple = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "node_flags", np.asarray(self.node_flags, dtype=bool))
        object.__setattr__(self, "element_flags", np.asarray(self.element_flags, dtype=bool))

    @property
    def node_indices(self) -> np.ndarray:
        return np.nonzero(self.node_flags)[0]

    @property
    def element_indices(self) -> np.ndarray:
        return np.nonzero(self.element_flags)[0]

    def measure(self, mesh: Mesh) -> float:
        """Sum of flagged element measures (the reported mask measure)."""
        return float(mesh.element_measures()[self.element_flags].sum())


# ===================================================================
# Construction
# ===================================================================

def build_interval_mesh(a: float, b: float, n_elems: int) -> Mesh:
    """Equispaced mesh of (a, b) with ``n_elems`` segments.

    Examples
    --------
    >>> m = build_interval_mesh(0.0, 1.0, 100)
    >>> m.node_count
    101
    """
    if not a < b:
        raise ValueError(f"interval endpoints must satisfy a < b, got a={a}, b={b}")
    if n_elems < 1:
        raise ValueError("n_elems must be a positive integer")
    nodes = np.linspace(a, b, n_elems + 1)
    elements = np.column_stack([np.arange(n_elems), np.arange(1, n_elems + 1)])
    return Mesh(dim=1, nodes=nodes, elements=elements, boundary_nodes=np.array([0, n_elems]))


def build_rect_mesh(nx: int, ny: int, lengths: tuple[float, float]) -> Mesh:
    """Structured triangulation of (0, Lx) x (0, Ly) with 2*nx*ny triangles.

    Each grid cell is split along its lower-left -> upper-right diagonal;
    the split direction never alternates, so meshes are reproducible.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be positive integers")
    lx, ly = float(lengths[0]), float(lengths[1])
    if lx <= 0.0 or ly <= 0.0:
        raise ValueError("rectangle side lengths must be positive")
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([gx.ravel(), gy.ravel()])  # node id = j*(nx+1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            n00 = j * (nx + 1) + i
            n10 = n00 + 1
            n01 = n00 + (nx + 1)
            n11 = n01 + 1
            # diagonal n00 -> n11
            tris.append((n00, n10, n11))
            tris.append((n00, n11, n01))
    elements = np.array(tris, dtype=np.int64)

    on_edge = (
        np.isclose(nodes[:, 0], 0.0)
        | np.isclose(nodes[:, 0], lx)
        | np.isclose(nodes[:, 1], 0.0)
        | np.isclose(nodes[:, 1], ly)
    )
    return Mesh(dim=2, nodes=nodes, elements=elements, boundary_nodes=np.nonzero(on_edge)[0])


def _normalize_boxes(dim: int, boxes) -> list[tuple]:
    out = []
    for box in boxes:
        box = tuple(box)
        if dim == 1:
            if len(box) != 2:
                raise ValueError(f"1D box must be (lo, hi), got {box}")
            out.append((float(box[0]), float(box[1])))
        else:
            if len(box) == 2 and all(hasattr(side, "__len__") for side in box):
                (x0, x1), (y0, y1) = box
            elif len(box) == 4:
                x0, x1, y0, y1 = box
            else:
                raise ValueError(f"2D box must be ((x0,x1),(y0,y1)) or (x0,x1,y0,y1), got {box}")
            out.append((float(x0), float(x1), float(y0), float(y1)))
    return out


def mask_from_boxes(mesh: Mesh, boxes) -> SubdomainMask:
    """Flag the nodes/elements of ``mesh`` inside a union of axis-aligned boxes.

    A node is flagged iff it lies in the closure of some box; an element is
    flagged iff all its vertices are flagged.  Boxes must sit inside the
    domain closure.  An all-empty mask is allowed but warned about.
    """
    if not boxes:
        raise ValueError("boxes must be a nonempty list")
    boxes = _normalize_boxes(mesh.dim, boxes)
    coords = mesh.coords()
    tol = 1e-12

    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    for box in boxes:
        if mesh.dim == 1:
            b = ((box[0], box[1]),)
        else:
            b = ((box[0], box[1]), (box[2], box[3]))
        for axis, (blo, bhi) in enumerate(b):
            if blo > bhi:
                raise ValueError(f"box has inverted bounds on axis {axis}: {box}")
            if blo < lo[axis] - tol or bhi > hi[axis] + tol:
                raise ValueError(f"box {box} is outside the domain")

    node_flags = np.zeros(mesh.node_count, dtype=bool)
    for box in boxes:
        inside = (coords[:, 0] >= box[0] - tol) & (coords[:, 0] <= box[1] + tol)
        if mesh.dim == 2:
            inside &= (coords[:, 1] >= box[2] - tol) & (coords[:, 1] <= box[3] + tol)
        node_flags |= inside

    element_flags = node_flags[mesh.elements].all(axis=1)
    if not node_flags.any():
        warnings.warn("observation mask flags no node", stacklevel=2)
    return SubdomainMask(node_flags=node_flags, element_flags=element_flags, boxes=tuple(boxes))


def erode_mask(mesh: Mesh, mask: SubdomainMask) -> SubdomainMask:
    """Strict-interior sub-mask: drop nodes touching any unflagged element.

    The kept nodes are exactly those whose nodal hat functions are supported
    inside the union of flagged elements, so fields built on them vanish
    identically outside the mask — the right dof set for "supported in O"
    (the parent mask's closure convention keeps one ring of nodes whose hats
    poke one element outside).  Kept elements are those with all vertices
    kept.  Erosion can empty a thin mask, which is warned about.
    """
    touched = np.zeros(mesh.node_count, dtype=bool)
    outside = mesh.elements[~mask.element_flags]
    touched[outside.ravel()] = True
    node_flags = mask.node_flags & ~touched
    element_flags = mask.element_flags & node_flags[mesh.elements].all(axis=1)
    if not node_flags.any():
        warnings.warn("eroded mask flags no node", stacklevel=2)
    return SubdomainMask(node_flags=node_flags, element_flags=element_flags, boxes=mask.boxes)


# ===================================================================
# Export
# ===================================================================

def export_mesh_csv(mesh: Mesh, path, mask: SubdomainMask | None = None) -> None:
    """Write one node row ``id,x[,y],is_boundary,in_obs`` per node and one
    element row ``id,n0,n1[,n2]`` per element."""
    is_boundary = np.zeros(mesh.node_count, dtype=bool)
    is_boundary[mesh.boundary_nodes] = True
    in_obs = mask.node_flags if mask is not None else np.zeros(mesh.node_count, dtype=bool)
    coords = mesh.coords()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        head = ["id", "x"] + (["y"] if mesh.dim == 2 else []) + ["is_boundary", "in_obs"]
        writer.writerow(head)
        for i in range(mesh.node_count):
            row = [i] + [repr(c) for c in coords[i]] + [int(is_boundary[i]), int(in_obs[i])]
            writer.writerow(row)
        writer.writerow(["id", "n0", "n1"] + (["n2"] if mesh.dim == 2 else []))
        for e in range(mesh.element_count):
            writer.writerow([e, *mesh.elements[e]])
