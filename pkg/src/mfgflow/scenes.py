"""Benchmark scene definitions.

A scene bundles everything a run needs: initial and terminal agent
distributions, the ground-truth obstacle field, the domain box used for
mass matching and error metrics, the number of time steps, and the cost
weights.  All fields are diagonal Gaussian mixtures; obstacles may carry
an overall scale and may be constant along chosen axes (the 3D and
high-dimensional scenes extend a 2D profile).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import SchemaError, UnknownSceneError
from .kernels import backend as K


class GaussianMixtureField:
    """c * sum_i w_i N(x; mu_i, diag(var_i)) over the non-constant axes."""

    def __init__(self, scale, weights, means, diag_covs, constant_dims=()):
        self.scale = float(scale)
        self.weights = np.atleast_1d(np.asarray(weights, dtype=np.float64))
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.diag_covs = np.atleast_2d(np.asarray(diag_covs, dtype=np.float64))
        self.constant_dims = tuple(int(i) for i in constant_dims)
        if self.scale < 0:
            raise ValueError("scale must be nonnegative")
        if self.means.shape != self.diag_covs.shape or len(self.weights) != self.means.shape[0]:
            raise ValueError(f"inconsistent component shapes: weights {self.weights.shape}, "
                             f"means {self.means.shape}, diag_covs {self.diag_covs.shape}")
        if np.any(self.diag_covs <= 0):
            raise ValueError("all variances must be strictly positive")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError(f"weights must be nonnegative and sum to 1, got {self.weights}")
        self.dim = self.means.shape[1]
        active = [j for j in range(self.dim) if j not in self.constant_dims]
        if not active:
            raise ValueError("at least one non-constant axis is required")
        self.active_dims = np.asarray(active, dtype=np.intp)

    @property
    def is_distribution(self) -> bool:
        return self.scale == 1.0 and not self.constant_dims

    def _active(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return x[:, self.active_dims]

    def density(self, x: np.ndarray) -> np.ndarray:
        val, _ = K.gm_pdf_fwd(self._active(x), self.means[:, self.active_dims],
                              self.diag_covs[:, self.active_dims], self.weights, self.scale)
        return val

    def logdensity(self, x: np.ndarray) -> np.ndarray:
        logp, _ = K.gm_logpdf_fwd(self._active(x), self.means[:, self.active_dims],
                                  self.diag_covs[:, self.active_dims], np.log(self.weights))
        return logp + np.log(self.scale)

    # graph-building counterparts (gradients flow to x)
    def density_nodes(self, x: Node) -> Node:
        xa = ad.take_cols(x, self.active_dims) if len(self.active_dims) != self.dim else x
        return ad.gm_pdf(xa, self.means[:, self.active_dims],
                         self.diag_covs[:, self.active_dims], self.weights, self.scale)

    def logdensity_nodes(self, x: Node) -> Node:
        xa = ad.take_cols(x, self.active_dims) if len(self.active_dims) != self.dim else x
        lp = ad.gm_logpdf(xa, self.means[:, self.active_dims],
                          self.diag_covs[:, self.active_dims], np.log(self.weights))
        return ad.add(lp, float(np.log(self.scale)))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if not self.is_distribution:
            raise ValueError("sampling requires scale == 1 and no constant axes")
        comps = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comps] + np.sqrt(self.diag_covs[comps]) * z

    def sample_qmc(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Scrambled low-discrepancy draw (component counts stratified).

        Lower-variance alternative to ``sample`` for Monte-Carlo loss
        batches; deterministic given the generator state.
        """
        if not self.is_distribution:
            raise ValueError("sampling requires scale == 1 and no constant axes")
        import warnings

        from scipy.stats import norm, qmc

        counts = np.floor(self.weights * n).astype(int)
        frac = self.weights * n - counts
        for i in np.argsort(-frac)[: n - counts.sum()]:
            counts[i] += 1
        out = np.empty((n, self.dim))
        offset = 0
        for i, c in enumerate(counts):
            if c == 0:
                continue
            with warnings.catch_warnings():
                # balance is secondary here; scrambled points beat plain MC anyway
                warnings.simplefilter("ignore", UserWarning)
                unit = qmc.Sobol(self.dim, scramble=True, seed=rng).random(c)
            # clip away exact 0/1 corners before the inverse CDF
            unit = np.clip(unit, 1e-12, 1 - 1e-12)
            z = norm.ppf(unit)
            out[offset:offset + c] = self.means[i] + np.sqrt(self.diag_covs[i]) * z
            offset += c
        return out

    def to_json_dict(self) -> dict:
        return {"scale": self.scale, "weights": self.weights.tolist(),
                "means": self.means.tolist(), "diag_covs": self.diag_covs.tolist(),
                "constant_dims": list(self.constant_dims)}


def gm_density(field: GaussianMixtureField, x) -> np.ndarray:
    return field.density(x)


def gm_logdensity(field: GaussianMixtureField, x) -> np.ndarray:
    return field.logdensity(x)


def gm_sample(field: GaussianMixtureField, rng: np.random.Generator, n: int) -> np.ndarray:
    return field.sample(rng, n)


@dataclass
class Scene:
    name: str
    d: int
    steps: int
    p0: GaussianMixtureField
    p1: GaussianMixtureField
    obstacle_true: GaussianMixtureField
    domain_lo: np.ndarray
    domain_hi: np.ndarray
    lam_transport: float
    lam_interaction: float
    lam_terminal: float

    def __post_init__(self):
        self.domain_lo = np.asarray(self.domain_lo, dtype=np.float64)
        self.domain_hi = np.asarray(self.domain_hi, dtype=np.float64)
        if np.any(self.domain_hi <= self.domain_lo):
            raise ValueError("degenerate domain box")
        for fname, f in (("p0", self.p0), ("p1", self.p1), ("obstacle", self.obstacle_true)):
            if f.dim != self.d:
                raise ValueError(f"{fname} has dim {f.dim}, scene has d={self.d}")
        if min(self.lam_transport, self.lam_interaction, self.lam_terminal) < 0:
            raise ValueError("cost weights must be nonnegative")

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lam_transport, self.lam_interaction, self.lam_terminal)


_DEFAULT_LAMBDAS = (1.0, 1.0, 5.0)
_SQ2 = float(np.sqrt(2.0))


def _iso(mean, var):
    mean = np.asarray(mean, dtype=np.float64)
    return GaussianMixtureField(1.0, [1.0], [mean], [np.full(len(mean), var)])


def _builtin_defs() -> dict:
    defs = {}

    defs["two_bars"] = dict(
        d=2,
        p0=GaussianMixtureField(1.0, [0.5, 0.5], [[-1.0, -2.0], [1.0, -2.0]],
                                [[0.2, 0.2], [0.2, 0.2]]),
        p1=GaussianMixtureField(1.0, [0.5, 0.5], [[-1.0, 2.8], [1.0, 2.8]],
                                [[0.2, 0.2], [0.2, 0.2]]),
        obstacle=GaussianMixtureField(50.0, [0.5, 0.5], [[-2.0, 1.25], [4.0, 0.75]],
                                      [[1.5, 0.01], [1.5, 0.01]]),
    )

    petals = [[_SQ2, _SQ2], [-_SQ2, _SQ2], [-_SQ2, -_SQ2], [_SQ2, -_SQ2]]
    targets = [[2.2, 2.2], [-2.2, 2.2], [-2.2, -2.2], [2.2, -2.2]]
    defs["flower"] = dict(
        d=2,
        p0=_iso([0.0, 0.0], 0.3),
        p1=GaussianMixtureField(1.0, [0.25] * 4, targets, [[0.2, 0.2]] * 4),
        obstacle=GaussianMixtureField(50.0, [0.25] * 4, petals, [[0.2, 0.4]] * 4),
    )

    defs["cylinders3"] = dict(
        d=3,
        p0=GaussianMixtureField(1.0, [0.5, 0.5], [[-1.2, -3.0, 0.0], [1.2, -3.0, 0.0]],
                                [[0.2, 0.2, 0.5]] * 2),
        p1=GaussianMixtureField(1.0, [0.5, 0.5], [[-1.2, 3.0, 0.0], [1.2, 3.0, 0.0]],
                                [[0.2, 0.2, 0.5]] * 2),
        obstacle=GaussianMixtureField(50.0, [1.0 / 3] * 3,
                                      [[0.0, -2.0, 0.0], [2.5, 2.0, 0.0], [-2.5, 2.0, 0.0]],
                                      [[0.5, 0.5, 1.0]] * 3, constant_dims=[2]),
    )

    defs["castle"] = dict(
        d=3,
        p0=_iso([0.0, -2.5, 0.0], 0.3),
        p1=_iso([0.0, 2.5, 0.0], 0.3),
        obstacle=GaussianMixtureField(50.0, [0.5, 0.5], [[-2.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
                                      [[1.8, 0.8, 0.8], [1.0, 0.6, 1.5]]),
    )

    defs["mountains"] = dict(
        d=3,
        p0=_iso([0.0, -2.5, 0.0], 0.3),
        p1=_iso([0.0, 2.5, 0.0], 0.3),
        obstacle=GaussianMixtureField(
            50.0, [0.25] * 4,
            [[1.0, 0.25, 0.0], [3.5, 0.25, 0.0], [-1.5, -0.35, 0.0], [-4.0, 0.5, 0.0]],
            [[0.5, 0.4, 0.8], [1.0, 0.6, 0.8], [1.2, 0.4, 1.0], [1.5, 0.6, 1.2]]),
    )

    for d in (2, 5, 10):
        mean0 = np.zeros(d)
        mean0[1] = 3.0
        mean1 = -mean0
        obs_var = np.ones(d)
        obs_var[1] = 0.5
        defs[f"gaussian_d{d}"] = dict(
            d=d,
            p0=_iso(mean0, 0.3),
            p1=_iso(mean1, 0.3),
            obstacle=GaussianMixtureField(50.0, [1.0], [np.zeros(d)], [obs_var],
                                          constant_dims=list(range(2, d))),
        )
    return defs


BUILTIN_SCENES = tuple(sorted(_builtin_defs()))


def builtin_scene(name: str, steps: int = 8) -> Scene:
    """Construct a named benchmark scene with the default cost weights."""
    defs = _builtin_defs()
    if name not in defs:
        raise UnknownSceneError(name, defs)
    spec = defs[name]
    d = spec["d"]
    lam = _DEFAULT_LAMBDAS
    return Scene(name=name, d=d, steps=steps, p0=spec["p0"], p1=spec["p1"],
                 obstacle_true=spec["obstacle"],
                 domain_lo=np.full(d, -3.0), domain_hi=np.full(d, 3.0),
                 lam_transport=lam[0], lam_interaction=lam[1], lam_terminal=lam[2])


# -- JSON round trip ---------------------------------------------------------------

def _field_from_json(obj: dict, path: str) -> GaussianMixtureField:
    for key in ("scale", "weights", "means", "diag_covs"):
        if key not in obj:
            raise SchemaError(f"{path}.{key}", "missing field")
    try:
        return GaussianMixtureField(obj["scale"], obj["weights"], obj["means"],
                                    obj["diag_covs"], obj.get("constant_dims", ()))
    except ValueError as e:
        raise SchemaError(path, str(e)) from None


def load_scene(text: str) -> Scene:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError("$", f"invalid JSON: {e}") from None
    for key in ("name", "d", "K", "lambdas", "domain", "p0", "p1", "obstacle"):
        if key not in obj:
            raise SchemaError(f"$.{key}", "missing field")
    lam = obj["lambdas"]
    for key in ("L", "I", "D"):
        if key not in lam:
            raise SchemaError(f"$.lambdas.{key}", "missing field")
    dom = obj["domain"]
    for key in ("lo", "hi"):
        if key not in dom:
            raise SchemaError(f"$.domain.{key}", "missing field")
    try:
        return Scene(
            name=obj["name"], d=int(obj["d"]), steps=int(obj["K"]),
            p0=_field_from_json(obj["p0"], "$.p0"),
            p1=_field_from_json(obj["p1"], "$.p1"),
            obstacle_true=_field_from_json(obj["obstacle"], "$.obstacle"),
            domain_lo=dom["lo"], domain_hi=dom["hi"],
            lam_transport=float(lam["L"]), lam_interaction=float(lam["I"]),
            lam_terminal=float(lam["D"]))
    except ValueError as e:
        raise SchemaError("$", str(e)) from None


def save_scene(scene: Scene) -> str:
    obj = {
        "name": scene.name, "d": scene.d, "K": scene.steps,
        "lambdas": {"L": scene.lam_transport, "I": scene.lam_interaction,
                    "D": scene.lam_terminal},
        "domain": {"lo": scene.domain_lo.tolist(), "hi": scene.domain_hi.tolist()},
        "p0": scene.p0.to_json_dict(), "p1": scene.p1.to_json_dict(),
        "obstacle": scene.obstacle_true.to_json_dict(),
    }
    return json.dumps(obj, indent=2)
