"""Spatial transforms: affine composed with a cubic B-spline free-form deformation.

A TransformStack maps common-space points x through the deformation first and
the affine second, y = G(D(x)).  The FFD displacement field is the tensor
product of cubic B-spline weights over a control lattice; control points
outside the stored lattice contribute zero displacement, so the map is
defined everywhere and is the identity far from the lattice.

Parameter vector convention for one stack (used by gradients and JSON):
index 0..8  affine matrix, row-major; 9..11 translation (mm);
12 + 3*c + a  displacement of control point c (flat, x fastest) along axis a.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import VolumeGrid


def bspline_basis(u):
    """Four cubic B-spline weights at local coordinate u in [0, 1).

    Accepts a scalar or an array; returns shape (4,) or (N, 4).
    """
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any(u_arr < 0.0) or np.any(u_arr >= 1.0):
        raise ValueError("u must lie in [0, 1)")
    u2 = u_arr * u_arr
    u3 = u2 * u_arr
    b = np.stack(
        [
            (1.0 - u_arr) ** 3 / 6.0,
            (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
            (-3.0 * u3 + 3.0 * u2 + 3.0 * u_arr + 1.0) / 6.0,
            u3 / 6.0,
        ],
        axis=-1,
    )
    return b


def bspline_basis_d(u):
    """Derivatives of the four cubic B-spline weights with respect to u."""
    u_arr = np.asarray(u, dtype=np.float64)
    u2 = u_arr * u_arr
    return np.stack(
        [
            -0.5 * (1.0 - u_arr) ** 2,
            (3.0 * u2 - 4.0 * u_arr) / 2.0,
            (-3.0 * u2 + 2.0 * u_arr + 1.0) / 2.0,
            0.5 * u2,
        ],
        axis=-1,
    )


def _as_points(x) -> tuple[np.ndarray, bool]:
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 3:
        raise ValueError("points must have shape (3,) or (N, 3)")
    return pts, single


@dataclass
class AffineTransform:
    """y = matrix @ (x - center) + center + translation.

    `center` is fixed metadata, not an optimized parameter; it keeps matrix
    and translation gradients comparably scaled when set to the domain center.
    """

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.matrix)) or not np.all(np.isfinite(self.translation)):
            raise ValueError("affine parameters must be finite")
        if abs(np.linalg.det(self.matrix)) < 1e-12:
            raise ValueError("affine matrix must be invertible")

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "AffineTransform":
        return cls(np.eye(3), np.zeros(3), np.asarray(center, dtype=float))

    def apply(self, x):
        pts, single = _as_points(x)
        out = (pts - self.center) @ self.matrix.T + self.center + self.translation
        return out[0] if single else out

    def parameters(self) -> np.ndarray:
        return np.concatenate([self.matrix.ravel(), self.translation])

    def with_parameters(self, vec) -> "AffineTransform":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (12,):
            raise ValueError("affine parameter vector must have 12 entries")
        return AffineTransform(vec[:9].reshape(3, 3), vec[9:], self.center.copy())


@dataclass
class FfdTransform:
    """Cubic B-spline displacement field on a control lattice.

    displacements has shape (n_control, 3) in mm, flat control order with x
    fastest, matching the volume storage convention.  Zero displacements make
    the deformation the identity.
    """

    control_origin: np.ndarray
    control_spacing: np.ndarray
    control_dims: tuple[int, int, int]
    displacements: np.ndarray | None = None

    def __post_init__(self):
        self.control_origin = np.asarray(self.control_origin, dtype=np.float64).reshape(3)
        self.control_spacing = np.asarray(self.control_spacing, dtype=np.float64).reshape(3)
        self.control_dims = tuple(int(d) for d in self.control_dims)
        if any(d < 4 for d in self.control_dims):
            raise ValueError("control lattice needs at least 4 points per axis")
        if np.any(self.control_spacing <= 0) or not np.all(np.isfinite(self.control_spacing)):
            raise ValueError("control spacing must be positive and finite")
        if self.displacements is None:
            self.displacements = np.zeros((self.n_control, 3))
        self.displacements = np.asarray(self.displacements, dtype=np.float64).reshape(self.n_control, 3)
        if not np.all(np.isfinite(self.displacements)):
            raise ValueError("control displacements must be finite")

    @property
    def n_control(self) -> int:
        nx, ny, nz = self.control_dims
        return nx * ny * nz

    @classmethod
    def for_domain(cls, grid: VolumeGrid, control_spacing: float | tuple = 10.0) -> "FfdTransform":
        """Lattice covering the grid with one extra cell on every side, so all
        grid points have full 4-point support."""
        sp = np.broadcast_to(np.asarray(control_spacing, dtype=float), (3,)).astype(float)
        lo, hi = grid.world_bounds()
        origin = lo - sp
        dims = np.ceil((hi - lo) / sp - 1e-9).astype(int) + 4
        return cls(origin, sp, tuple(int(d) for d in np.maximum(dims, 4)))

    def _lattice_coords(self, pts: np.ndarray):
        t = (pts - self.control_origin) / self.control_spacing
        fl = np.floor(t)
        base = fl.astype(np.int64) - 1
        u = t - fl
        return base, u

    def _support_axes(self, pts: np.ndarray):
        """Per-axis clipped indices (N, 4), inside masks and basis weights."""
        base, u = self._lattice_coords(pts)
        offs = np.arange(4)
        idx, ok, w = [], [], []
        for a in range(3):
            ia = base[:, a : a + 1] + offs
            ok.append((ia >= 0) & (ia < self.control_dims[a]))
            idx.append(np.clip(ia, 0, self.control_dims[a] - 1))
            w.append(bspline_basis(u[:, a]))
        return idx, ok, w

    def support_terms(self, pts: np.ndarray):
        """Yield (flat_control_index, inside_mask, weight) for the 64 tensor terms.

        Indices are clipped in-lattice; `inside` marks the terms whose control
        point actually exists (the rest contribute zero displacement).
        """
        idx, ok, w = self._support_axes(pts)
        ncx, ncy = self.control_dims[0], self.control_dims[1]
        for l in range(4):
            cx, okx, wxl = idx[0][:, l], ok[0][:, l], w[0][:, l]
            for m in range(4):
                cxy = cx + ncx * idx[1][:, m]
                okxy = okx & ok[1][:, m]
                wxy = wxl * w[1][:, m]
                for n in range(4):
                    yield (
                        cxy + ncx * ncy * idx[2][:, n],
                        okxy & ok[2][:, n],
                        wxy * w[2][:, n],
                    )

    def _coefficient_lattice(self) -> np.ndarray:
        """Control displacements as an (ncx, ncy, ncz, 3) coefficient array."""
        ncx, ncy, ncz = self.control_dims
        return self.displacements.reshape(ncz, ncy, ncx, 3).transpose(2, 1, 0, 3)

    def displacement(self, pts: np.ndarray) -> np.ndarray:
        """Displacement vectors (N, 3) at world points.

        Evaluates the cubic B-spline tensor product with the control
        displacements as spline coefficients (no prefilter); lattice points
        outside the control grid contribute zero, matching support_terms.
        """
        pts = np.asarray(pts, dtype=np.float64)
        t = (pts - self.control_origin) / self.control_spacing
        coeff = self._coefficient_lattice()
        return np.stack(
            [
                ndimage.map_coordinates(
                    coeff[..., a], t.T, order=3, mode="grid-constant",
                    cval=0.0, prefilter=False,
                )
                for a in range(3)
            ],
            axis=1,
        )

    def displacement_jacobian(self, pts: np.ndarray) -> np.ndarray:
        """d(displacement)/dx of shape (N, 3, 3)."""
        pts = np.asarray(pts, dtype=np.float64)
        idx, ok, w = self._support_axes(pts)
        _, u = self._lattice_coords(pts)
        dw = [bspline_basis_d(u[:, a]) / self.control_spacing[a] for a in range(3)]
        ncx, ncy = self.control_dims[0], self.control_dims[1]
        jac = np.zeros((len(pts), 3, 3))
        for l in range(4):
            cx, okx = idx[0][:, l], ok[0][:, l]
            for m in range(4):
                cxy = cx + ncx * idx[1][:, m]
                okxy = okx & ok[1][:, m]
                for n in range(4):
                    inside = okxy & ok[2][:, n]
                    flat = cxy + ncx * ncy * idx[2][:, n]
                    disp = inside[:, None] * self.displacements[flat]
                    gw = np.stack(
                        [
                            dw[0][:, l] * w[1][:, m] * w[2][:, n],
                            w[0][:, l] * dw[1][:, m] * w[2][:, n],
                            w[0][:, l] * w[1][:, m] * dw[2][:, n],
                        ],
                        axis=1,
                    )
                    jac += disp[:, :, None] * gw[:, None, :]
        return jac

    def apply(self, x):
        pts, single = _as_points(x)
        out = pts + self.displacement(pts)
        return out[0] if single else out


@dataclass
class TransformStack:
    """F(x) = affine(ffd(x)); the composition order is fixed."""

    affine: AffineTransform
    ffd: FfdTransform

    @classmethod
    def identity_for_domain(
        cls, grid: VolumeGrid, control_spacing: float | tuple = 10.0, center=None
    ) -> "TransformStack":
        if center is None:
            center = grid.center()
        return cls(AffineTransform.identity(center), FfdTransform.for_domain(grid, control_spacing))

    @property
    def n_parameters(self) -> int:
        return 12 + 3 * self.ffd.n_control

    def apply(self, x):
        pts, single = _as_points(x)
        out = self.affine.apply(self.ffd.apply(pts))
        return out[0] if single else out

    def parameters(self) -> np.ndarray:
        return np.concatenate([self.affine.parameters(), self.ffd.displacements.ravel()])

    def with_parameters(self, vec) -> "TransformStack":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_parameters,):
            raise ValueError(f"expected {self.n_parameters} parameters, got {vec.shape}")
        affine = self.affine.with_parameters(vec[:12])
        ffd = FfdTransform(
            self.ffd.control_origin.copy(),
            self.ffd.control_spacing.copy(),
            self.ffd.control_dims,
            vec[12:].reshape(-1, 3),
        )
        return TransformStack(affine, ffd)

    def param_jacobian(self, x, d: int) -> np.ndarray:
        """Derivative of apply(x) with respect to scalar parameter `d`."""
        pts, _ = _as_points(x)
        if not 0 <= d < self.n_parameters:
            raise IndexError(f"parameter index {d} out of range [0, {self.n_parameters})")
        p = pts[0]
        if d < 9:
            a, b = divmod(d, 3)
            out = np.zeros(3)
            out[a] = (self.ffd.apply(p) - self.affine.center)[b]
            return out
        if d < 12:
            out = np.zeros(3)
            out[d - 9] = 1.0
            return out
        ctrl, axis = divmod(d - 12, 3)
        weight = 0.0
        for flat, inside, w in self.ffd.support_terms(pts[:1]):
            if inside[0] and flat[0] == ctrl:
                weight += w[0]
        return self.affine.matrix[:, axis] * weight

    def spatial_jacobian(self, x) -> np.ndarray:
        """dF/dx, shape (3, 3) for a single point or (N, 3, 3) for many."""
        pts, single = _as_points(x)
        inner = np.eye(3)[None] + self.ffd.displacement_jacobian(pts)
        jac = np.einsum("ab,nbc->nac", self.affine.matrix, inner)
        return jac[0] if single else jac

    def to_dict(self) -> dict:
        return {
            "affine": {
                "parameters": self.affine.parameters().tolist(),
                "center": self.affine.center.tolist(),
            },
            "ffd": {
                "origin": self.ffd.control_origin.tolist(),
                "spacing": self.ffd.control_spacing.tolist(),
                "dims": list(self.ffd.control_dims),
                "displacements": self.ffd.displacements.ravel().tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformStack":
        aff = d["affine"]
        params = np.asarray(aff["parameters"], dtype=float)
        affine = AffineTransform(
            params[:9].reshape(3, 3), params[9:12], np.asarray(aff.get("center", (0, 0, 0)), dtype=float)
        )
        f = d["ffd"]
        ffd = FfdTransform(
            np.asarray(f["origin"], dtype=float),
            np.asarray(f["spacing"], dtype=float),
            tuple(f["dims"]),
            np.asarray(f["displacements"], dtype=float).reshape(-1, 3),
        )
        return cls(affine, ffd)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TransformStack":
        return cls.from_dict(json.loads(text))


@dataclass
class TransformSet:
    """One stack per image plus one for the prior map."""

    image_transforms: list[TransformStack]
    map_transform: TransformStack

    @classmethod
    def identity_for_domain(
        cls, grid: VolumeGrid, n_images: int, control_spacing: float | tuple = 10.0
    ) -> "TransformSet":
        return cls(
            [TransformStack.identity_for_domain(grid, control_spacing) for _ in range(n_images)],
            TransformStack.identity_for_domain(grid, control_spacing),
        )

    @property
    def n_images(self) -> int:
        return len(self.image_transforms)

    def to_dict(self) -> dict:
        return {
            "images": [t.to_dict() for t in self.image_transforms],
            "map": self.map_transform.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSet":
        return cls(
            [TransformStack.from_dict(t) for t in d["images"]],
            TransformStack.from_dict(d["map"]),
        )
