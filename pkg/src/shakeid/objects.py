"""Composite payload objects with analytically known inertial parameters.

The test payload is a flat H-shaped plate built from three cuboids with
ten through-holes.  Each hole can carry a cylindrical weight (steel or
ABS, full or half height) so that many distinct, precisely computable
mass distributions can be realized from one part.  Holes are modeled as
negative-density cylinders carved from the plate; weights are separate
positive-density cylinders placed at the hole locations.

Ground-truth parameters are obtained by summing the signed closed-form
primitive inertias with parallel-axis transfers, never by transcription.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .rigidbody import InertialParams, Pose, transform_mhi

__all__ = [
    "PrimitiveShape",
    "CompositeObject",
    "NonPositiveMass",
    "composite_inertia",
    "build_catalog",
    "load_catalog",
    "save_catalog",
    "catalog_by_label",
    "object_bounding_half_extents",
    "PLATE",
    "HOLE_CENTERS",
    "DENSITY_STEEL",
    "DENSITY_ABS",
]

DENSITY_STEEL = 7850.0  # kg/m^3
DENSITY_ABS = 1050.0


class NonPositiveMass(ValueError):
    """Signed primitive masses cancel to a non-positive total."""


@dataclass(frozen=True)
class PrimitiveShape:
    """One solid (or carved hole, for negative density).

    ``kind`` is "cuboid" (uses ``dims``) or "cylinder" (uses ``radius``
    and ``height``, axis along local z).  ``pose`` places the primitive
    frame (at the primitive's own COM) in the object frame.
    """

    kind: str
    density: float
    pose: Pose = field(default_factory=Pose.identity)
    dims: tuple = None
    radius: float = None
    height: float = None

    def __post_init__(self):
        if self.kind == "cuboid":
            if self.dims is None or len(self.dims) != 3 or min(self.dims) <= 0:
                raise ValueError("cuboid needs three positive dims")
            object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        elif self.kind == "cylinder":
            if not (self.radius and self.height) or self.radius <= 0 or self.height <= 0:
                raise ValueError("cylinder needs positive radius and height")
        else:
            raise ValueError(f"unknown primitive kind {self.kind!r}")

    @property
    def volume(self) -> float:
        if self.kind == "cuboid":
            a, b, c = self.dims
            return a * b * c
        return np.pi * self.radius**2 * self.height

    @property
    def signed_mass(self) -> float:
        return self.density * self.volume

    def com_inertia(self) -> np.ndarray:
        """Inertia about the primitive COM, primitive axes (signed)."""
        m = self.signed_mass
        if self.kind == "cuboid":
            a, b, c = self.dims
            return m / 12.0 * np.diag([b * b + c * c, a * a + c * c, a * a + b * b])
        r, h = self.radius, self.height
        ixx = m * (3.0 * r * r + h * h) / 12.0
        return np.diag([ixx, ixx, m * r * r / 2.0])

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "density": self.density, "pose": self.pose.to_dict()}
        if self.kind == "cuboid":
            d["dims"] = list(self.dims)
        else:
            d["radius"] = self.radius
            d["height"] = self.height
        return d

    @staticmethod
    def from_dict(d: dict) -> "PrimitiveShape":
        return PrimitiveShape(
            kind=d["kind"],
            density=d["density"],
            pose=Pose.from_dict(d["pose"]),
            dims=tuple(d["dims"]) if "dims" in d else None,
            radius=d.get("radius"),
            height=d.get("height"),
        )


@dataclass(frozen=True)
class CompositeObject:
    """A payload assembled from signed primitives.

    ``grasp_pose`` places the object frame in the end-effector frame.
    An empty primitive list encodes the "Free" (no payload) case.
    """

    label: str
    primitives: tuple
    grasp_pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))

    @property
    def is_empty(self) -> bool:
        return len(self.primitives) == 0

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "primitives": [p.to_dict() for p in self.primitives],
            "grasp_pose": self.grasp_pose.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "CompositeObject":
        return CompositeObject(
            label=d["label"],
            primitives=tuple(PrimitiveShape.from_dict(p) for p in d["primitives"]),
            grasp_pose=Pose.from_dict(d["grasp_pose"]),
        )


def composite_inertia(obj: CompositeObject) -> InertialParams:
    """Ground-truth inertial parameters of a composite, in the object frame.

    Sums signed primitive masses, first moments and origin-frame inertia
    tensors (closed-form COM inertia + parallel-axis transfer per
    primitive).  Raises :class:`NonPositiveMass` when the signed masses
    cancel to <= 0.
    """
    if obj.is_empty:
        raise NonPositiveMass(f"object {obj.label!r} has no primitives")
    total_m = 0.0
    total_h = np.zeros(3)
    total_I = np.zeros((3, 3))
    for prim in obj.primitives:
        m = np.array([prim.signed_mass])
        h = np.zeros((1, 3))
        I = prim.com_inertia()[None, :, :]
        m, h, I = transform_mhi(m, h, I, prim.pose.rotation, prim.pose.translation)
        total_m += m[0]
        total_h += h[0]
        total_I += I[0]
    if total_m <= 0.0:
        raise NonPositiveMass(f"object {obj.label!r} has signed mass {total_m:.3g} <= 0")
    return InertialParams(total_m, total_h / total_m, total_I)


def object_bounding_half_extents(obj: CompositeObject) -> np.ndarray:
    """Axis-aligned half extents of the solid primitives in the object frame."""
    hi = np.zeros(3)
    for prim in obj.primitives:
        if prim.density <= 0:
            continue
        if prim.kind == "cuboid":
            local = 0.5 * np.abs(np.asarray(prim.dims))
        else:
            local = np.array([prim.radius, prim.radius, prim.height / 2.0])
        reach = np.abs(prim.pose.rotation) @ local + np.abs(prim.pose.translation)
        hi = np.maximum(hi, reach)
    return hi


# ---------------------------------------------------------------------------
# The shipped plate design
# ---------------------------------------------------------------------------
# H-shaped plate in the object x-y plane, thickness along z.  Ten holes:
# three per side bar (y = -0.08, 0, +0.08) and four along the center bar.

_PLATE_THICKNESS = 0.03
_HOLE_RADIUS = 0.012

PLATE = (
    # (dims, center)
    ((0.16, 0.05, _PLATE_THICKNESS), (0.0, 0.0, 0.0)),
    ((0.05, 0.22, _PLATE_THICKNESS), (-0.105, 0.0, 0.0)),
    ((0.05, 0.22, _PLATE_THICKNESS), (0.105, 0.0, 0.0)),
)

HOLE_CENTERS = (
    (-0.105, -0.08), (-0.105, 0.0), (-0.105, 0.08),
    (-0.06, 0.0), (-0.02, 0.0), (0.02, 0.0), (0.06, 0.0),
    (0.105, -0.08), (0.105, 0.0), (0.105, 0.08),
)

_DEFAULT_GRASP = Pose.from_translation((0.05, 0.0, 0.0))


def _plate_primitives() -> list:
    prims = []
    for dims, center in PLATE:
        prims.append(
            PrimitiveShape("cuboid", DENSITY_ABS, Pose.from_translation(center), dims=dims)
        )
    for hx, hy in HOLE_CENTERS:
        prims.append(
            PrimitiveShape(
                "cylinder",
                -DENSITY_ABS,
                Pose.from_translation((hx, hy, 0.0)),
                radius=_HOLE_RADIUS,
                height=_PLATE_THICKNESS,
            )
        )
    return prims


def _weight(hole: int, density: float, half: bool = False) -> PrimitiveShape:
    hx, hy = HOLE_CENTERS[hole]
    height = _PLATE_THICKNESS / 2.0 if half else _PLATE_THICKNESS
    # half-height weights rest on the bottom of the hole
    z = -_PLATE_THICKNESS / 4.0 if half else 0.0
    return PrimitiveShape(
        "cylinder", density, Pose.from_translation((hx, hy, z)), radius=_HOLE_RADIUS, height=height
    )


# hole sets per named configuration
_CONFIGS = {
    "Full Steel": {h: ("steel", False) for h in range(10)},
    "Full ABS": {h: ("abs", False) for h in range(10)},
    "Full ABS Half": {h: ("abs", True) for h in range(10)},
    "Half and Half": {**{h: ("steel", False) for h in (0, 1, 2, 3, 4)},
                      **{h: ("abs", False) for h in (5, 6, 7, 8, 9)}},
    "Barbell": {1: ("steel", False), 8: ("steel", False)},
    "Corner": {0: ("steel", False)},
    "Hammer": {0: ("steel", False), 1: ("steel", False), 2: ("steel", False)},
    "Tee": {h: ("steel", False) for h in (0, 1, 2, 3, 4, 5, 6)},
    "Center": {h: ("steel", False) for h in (3, 4, 5, 6)},
    "Ring": {h: ("steel", False) for h in (0, 2, 7, 9)},
    "Empty": {},
}

WEIGHTED_LABELS = tuple(k for k in _CONFIGS if k != "Empty")
HELD_OUT_LABELS = WEIGHTED_LABELS  # the ten payload configurations used for evaluation


def make_object(label: str, holes: dict, grasp_pose: Pose = _DEFAULT_GRASP) -> CompositeObject:
    """Plate object with weights placed per ``holes`` {index: (material, half)}."""
    prims = _plate_primitives()
    for hole, (material, half) in sorted(holes.items()):
        density = DENSITY_STEEL if material == "steel" else DENSITY_ABS
        prims.append(_weight(hole, density, half=half))
    return CompositeObject(label=label, primitives=tuple(prims), grasp_pose=grasp_pose)


def build_catalog() -> list:
    """The ten weighted plate configurations plus "Empty" and "Free"."""
    catalog = [make_object(label, holes) for label, holes in _CONFIGS.items()]
    catalog.append(CompositeObject(label="Free", primitives=(), grasp_pose=Pose.identity()))
    return catalog


def save_catalog(catalog, path) -> None:
    with open(path, "w") as f:
        json.dump([obj.to_dict() for obj in catalog], f, indent=1)


def load_catalog(path=None) -> list:
    """Load a catalog JSON; defaults to the shipped file."""
    if path is None:
        with resources.files("shakeid.data").joinpath("objects.json").open() as f:
            raw = json.load(f)
    else:
        with open(path) as f:
            raw = json.load(f)
    return [CompositeObject.from_dict(d) for d in raw]


def catalog_by_label(catalog) -> dict:
    return {obj.label: obj for obj in catalog}
