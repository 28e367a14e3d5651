"""Plain-text configuration files for models and experiments.

The format is deliberately rigid so that experiment inputs are auditable:
one ``key = value`` assignment per line, ``#`` starts a comment line, and
anything unrecognized is an error rather than a silent default.  Vectors
are comma-separated numbers.  Seed lists accept either an explicit comma
list or a half-open range ``lo:hi``.

Model files describe one cost structure::

    dim = 1
    horizon = 1.0
    kappa_x = 0.3
    kappa_a = 1.0
    kappa_g = 0.8
    c_aa = 0.4
    c_xx = 0.2
    c_g = 0.3
    # optional bounded perturbations, numbered from 1
    term1.target = L
    term1.g = sin
    term1.amp = 0.2
    term1.u_x = 1.0

Experiment files point at a model (path resolved relative to the config
file) and fix the sweep::

    model = lq1d.model
    n_list = 8, 16, 32, 64
    seeds = 0:16
    dt = 0.01
    ref_particles = 1024
    m0 = uniform(-1.0, 1.0)
    metrics = x_sup, alpha_int, w2x_sup, w2joint_int
"""

import os
import re
from dataclasses import dataclass, field

from .fbsde import TruncatedGauss, UniformBox
from .model import InteractionSpec, ModelSpec, SmoothTerm

_KEY_RE = re.compile(r"^[a-z][a-z0-9_]*(\.[a-z_]+)?$")

_MODEL_SCALARS = {
    "dim": int,
    "horizon": float,
    "common_noise": float,
    "kappa_x": float,
    "kappa_a": float,
    "kappa_g": float,
    "c_aa": float,
    "c_xx": float,
    "c_g": float,
}
_TERM_FIELDS = {"target", "g", "amp", "u_x", "u_a", "w_x", "w_a", "phase"}
_METRICS = ("x_sup", "alpha_int", "w2x_sup", "w2joint_int")


def parse_kv(text, what="config"):
    """Strict key = value lines; returns an insertion-ordered dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError("%s line %d: expected 'key = value', got %r" % (what, lineno, raw))
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not _KEY_RE.match(key):
            raise ValueError("%s line %d: bad key %r" % (what, lineno, key))
        if key in out:
            raise ValueError("%s line %d: duplicate key %r" % (what, lineno, key))
        if not value:
            raise ValueError("%s line %d: empty value for %r" % (what, lineno, key))
        out[key] = value
    return out


def _floats(value, what):
    try:
        return tuple(float(p.strip()) for p in value.split(","))
    except ValueError:
        raise ValueError("%s: expected comma-separated numbers, got %r" % (what, value))


def _ints(value, what):
    if ":" in value:
        lo, _, hi = value.partition(":")
        try:
            lo, hi = int(lo), int(hi)
        except ValueError:
            raise ValueError("%s: bad range %r" % (what, value))
        if hi <= lo:
            raise ValueError("%s: empty range %r" % (what, value))
        return tuple(range(lo, hi))
    try:
        return tuple(int(p.strip()) for p in value.split(","))
    except ValueError:
        raise ValueError("%s: expected comma-separated integers, got %r" % (what, value))


def parse_m0(value):
    """Initial-law descriptor: uniform(lo, hi) or gauss(mean, sd, lo, hi).

    Both choices have bounded support, so every moment of the initial law
    is finite.
    """
    m = re.match(r"^(uniform|gauss)\s*\(([^)]*)\)$", value.strip())
    if not m:
        raise ValueError("m0 must be uniform(lo, hi) or gauss(mean, sd, lo, hi), got %r" % value)
    args = _floats(m.group(2), "m0")
    if m.group(1) == "uniform":
        if len(args) != 2:
            raise ValueError("uniform m0 takes (lo, hi), got %d values" % len(args))
        return UniformBox(*args)
    if len(args) != 4:
        raise ValueError("gauss m0 takes (mean, sd, lo, hi), got %d values" % len(args))
    return TruncatedGauss(*args)


def model_from_dict(kv, what="model"):
    scalars = {}
    terms = {}
    for key, value in kv.items():
        if key in _MODEL_SCALARS:
            try:
                scalars[key] = _MODEL_SCALARS[key](value)
            except ValueError:
                raise ValueError("%s: key %r needs a number, got %r" % (what, key, value))
        elif "." in key:
            name, _, fieldname = key.partition(".")
            if not re.match(r"^term[0-9]+$", name) or fieldname not in _TERM_FIELDS:
                raise ValueError("%s: unknown key %r" % (what, key))
            terms.setdefault(name, {})[fieldname] = value
        else:
            raise ValueError("%s: unknown key %r" % (what, key))
    for req in ("dim", "horizon", "kappa_a"):
        if req not in scalars:
            raise ValueError("%s: missing required key %r" % (what, req))

    smooth = []
    for name in sorted(terms, key=lambda s: int(s[4:])):
        spec = terms[name]
        kwargs = {}
        for fieldname, value in spec.items():
            if fieldname in ("target", "g"):
                kwargs[fieldname] = value
            elif fieldname in ("amp", "phase"):
                kwargs[fieldname] = float(value)
            else:
                kwargs[fieldname] = _floats(value, "%s.%s" % (name, fieldname))
        d = scalars["dim"]
        for vec in ("u_x", "u_a", "w_x", "w_a"):
            kwargs.setdefault(vec, (0.0,) * d)
        smooth.append(SmoothTerm(**kwargs))

    interaction = InteractionSpec(
        c_aa=scalars.pop("c_aa", 0.0),
        c_xx=scalars.pop("c_xx", 0.0),
        c_g=scalars.pop("c_g", 0.0),
        smooth_terms=tuple(smooth),
    )
    return ModelSpec(interaction=interaction, **scalars)


def load_model(path):
    with open(path) as fh:
        return model_from_dict(parse_kv(fh.read(), what=path), what=path)


@dataclass
class ExperimentConfig:
    """One convergence sweep: model, population ladder, seeds, resolution."""

    model_path: str
    model: ModelSpec
    n_list: tuple
    seeds: tuple
    dt: float
    ref_particles: int
    m0: object
    metrics: tuple = _METRICS

    def __post_init__(self):
        assert len(self.n_list) >= 1
        if any(b <= a for a, b in zip(self.n_list, self.n_list[1:])):
            raise ValueError("n_list must be strictly increasing")
        if min(self.n_list) < 2:
            raise ValueError("populations need at least 2 players")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ValueError("seeds must be non-empty and distinct")
        if self.dt <= 0.0 or self.dt > self.model.horizon:
            raise ValueError("dt must lie in (0, horizon]")
        if self.ref_particles < max(self.n_list):
            raise ValueError("ref_particles must cover the largest population")
        for m in self.metrics:
            if m not in _METRICS:
                raise ValueError("unknown metric %r (catalog: %s)" % (m, ", ".join(_METRICS)))

    @property
    def steps(self):
        n = round(self.model.horizon / self.dt)
        assert abs(n * self.dt - self.model.horizon) < 1e-9 * self.model.horizon, (
            "dt must divide the horizon"
        )
        return int(n)


def config_from_dict(kv, base_dir=".", what="config"):
    known = {"model", "n_list", "seeds", "dt", "ref_particles", "m0", "metrics"}
    unknown = set(kv) - known
    if unknown:
        raise ValueError("%s: unknown keys %s" % (what, ", ".join(sorted(unknown))))
    for req in ("model", "n_list", "seeds", "dt"):
        if req not in kv:
            raise ValueError("%s: missing required key %r" % (what, req))

    model_path = kv["model"]
    if not os.path.isabs(model_path):
        model_path = os.path.join(base_dir, model_path)
    model = load_model(model_path)
    n_list = _ints(kv["n_list"], "n_list")
    seeds = _ints(kv["seeds"], "seeds")
    dt = float(kv["dt"])
    ref = int(kv["ref_particles"]) if "ref_particles" in kv else 4 * max(n_list)
    m0 = parse_m0(kv["m0"]) if "m0" in kv else UniformBox(-1.0, 1.0)
    metrics = _METRICS
    if "metrics" in kv:
        metrics = tuple(p.strip() for p in kv["metrics"].split(","))
    return ExperimentConfig(
        model_path=model_path,
        model=model,
        n_list=n_list,
        seeds=seeds,
        dt=dt,
        ref_particles=ref,
        m0=m0,
        metrics=metrics,
    )


def load_config(path):
    with open(path) as fh:
        return config_from_dict(
            parse_kv(fh.read(), what=path), base_dir=os.path.dirname(path) or ".", what=path
        )
