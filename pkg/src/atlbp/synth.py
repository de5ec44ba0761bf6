"""Deterministic synthetic sessions in the dataset file format.

Each user ``u`` gets a baseline offset ``b_u ~ N(0, baseline_scale^2)`` on
every psi dimension. Each outcome class has a temporal signature over the
normalized frame position ``s = (t + 0.5) / T``; it is added along a
class-specific direction inside the first ``signal_dims`` psi dimensions,
scaled by ``signal_strength``. ATT, GIVEUP, SHINT and SOF have zero-mean
signatures, so time-averaging cannot tell them apart.

The affect and identity embeddings are fixed random linear expansions of a
low-dimensional latent that carries the same class signature and a
per-user offset.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import LABEL_NAMES, DatasetHeader, OutcomeLabel, Segment, write_dataset
from .errors import UsageError

DEFAULT_LABEL_DISTRIBUTION = {
    "ATT": 0.06,
    "GIVEUP": 0.05,
    "GUESS": 0.04,
    "NOTR": 0.06,
    "SHINT": 0.07,
    "SKIP": 0.16,
    "SOF": 0.56,
}


def _pulse(s, center, width=0.12):
    return 2.0 * np.exp(-0.5 * ((s - center) / width) ** 2)


SIGNATURES = {
    OutcomeLabel.ATT: lambda s: 2.0 * s - 1.0,           # ramp up
    OutcomeLabel.GIVEUP: lambda s: 1.0 - 2.0 * s,        # ramp down
    OutcomeLabel.GUESS: lambda s: _pulse(s, 0.5),        # mid pulse
    OutcomeLabel.NOTR: lambda s: np.full_like(s, 0.8),   # constant offset
    OutcomeLabel.SHINT: lambda s: np.sin(4.0 * np.pi * s),  # oscillation
    OutcomeLabel.SKIP: lambda s: _pulse(s, 0.85),        # late pulse
    OutcomeLabel.SOF: lambda s: np.zeros_like(s),        # flat
}


def signature(label: int, n_frames: int) -> np.ndarray:
    s = (np.arange(n_frames) + 0.5) / n_frames
    return SIGNATURES[OutcomeLabel(label)](s)


@dataclass
class SyntheticSpec:
    n_users: int = 54
    two_session_fraction: float = 14 / 54
    problems_per_session: tuple = (30, 51)
    frames_per_problem: tuple = (8, 16)
    label_distribution: dict = field(default_factory=lambda: dict(DEFAULT_LABEL_DISTRIBUTION))
    signal_strength: float = 1.0
    baseline_scale: float = 1.0
    noise_scale: float = 0.5
    embedding_noise: float = 0.1
    dim_psi: int = 49
    dim_rho: int = 256
    dim_xi: int = 128
    signal_dims: int = 4
    latent_dim: int = 8
    fps: float = 3.0
    decimals: int = 6
    seed: int = 0

    def validate(self) -> None:
        probs = self.label_probabilities()
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise UsageError("label distribution must be nonnegative and sum to 1")
        for name in ("signal_strength", "baseline_scale", "noise_scale", "embedding_noise"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0")
        if self.n_users < 1:
            raise UsageError("n_users must be positive")
        if not 0 <= self.two_session_fraction <= 1:
            raise UsageError("two_session_fraction must lie in [0, 1]")
        lo, hi = self.problems_per_session
        flo, fhi = self.frames_per_problem
        if not (1 <= lo <= hi and 1 <= flo <= fhi):
            raise UsageError("problem and frame ranges must be positive and ordered")
        if self.dim_psi < self.signal_dims:
            raise UsageError(f"dim_psi={self.dim_psi} is below the signal subspace size {self.signal_dims}")
        if min(self.dim_rho, self.dim_xi) < self.latent_dim or self.latent_dim < 1:
            raise UsageError(f"embedding dims must be at least latent_dim={self.latent_dim}")
        if self.signal_dims < 1:
            raise UsageError("signal_dims must be positive")

    def label_probabilities(self) -> np.ndarray:
        unknown = set(self.label_distribution) - set(LABEL_NAMES)
        if unknown:
            raise UsageError(f"unknown labels in distribution: {sorted(unknown)}")
        return np.array([float(self.label_distribution.get(n, 0.0)) for n in LABEL_NAMES])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["problems_per_session"] = list(self.problems_per_session)
        d["frames_per_problem"] = list(self.frames_per_problem)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for key in ("problems_per_session", "frames_per_problem"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


def _unit_rows(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate(spec: SyntheticSpec) -> tuple[DatasetHeader, list[Segment]]:
    """Build the dataset in memory. Identical specs give identical output."""
    spec.validate()
    probs = spec.label_probabilities()
    root = np.random.SeedSequence(spec.seed)
    structure_seq, layout_seq, user_root = root.spawn(3)
    structure = np.random.default_rng(structure_seq)
    psi_dirs = _unit_rows(structure, 7, spec.signal_dims)
    latent_dirs = _unit_rows(structure, 7, spec.latent_dim)
    expand_rho = structure.normal(scale=1.0 / np.sqrt(spec.latent_dim), size=(spec.dim_rho, spec.latent_dim))
    expand_xi = structure.normal(scale=1.0 / np.sqrt(spec.latent_dim), size=(spec.dim_xi, spec.latent_dim))

    layout = np.random.default_rng(layout_seq)
    n_two = int(round(spec.two_session_fraction * spec.n_users))
    two_session = set(layout.choice(spec.n_users, size=n_two, replace=False).tolist())

    width = len(str(spec.n_users - 1))
    segments = []
    for u, seq in enumerate(user_root.spawn(spec.n_users)):
        rng = np.random.default_rng(seq)
        user = f"u{u:0{width}d}"
        base_psi = rng.normal(scale=spec.baseline_scale, size=spec.dim_psi)
        base_lat = rng.normal(scale=spec.baseline_scale, size=spec.latent_dim)
        for sess in range(2 if u in two_session else 1):
            n_prob = int(rng.integers(spec.problems_per_session[0], spec.problems_per_session[1] + 1))
            for p in range(n_prob):
                label = int(rng.choice(7, p=probs))
                T = int(rng.integers(spec.frames_per_problem[0], spec.frames_per_problem[1] + 1))
                sig = spec.signal_strength * signature(label, T)
                psi = base_psi + rng.normal(scale=spec.noise_scale, size=(T, spec.dim_psi))
                psi[:, :spec.signal_dims] += np.outer(sig, psi_dirs[label])
                lat = base_lat + np.outer(sig, latent_dirs[label])
                lat = lat + rng.normal(scale=spec.noise_scale, size=lat.shape)
                rho = lat @ expand_rho.T + rng.normal(scale=spec.embedding_noise, size=(T, spec.dim_rho))
                xi = lat @ expand_xi.T + rng.normal(scale=spec.embedding_noise, size=(T, spec.dim_xi))
                segments.append(Segment(
                    user_id=user,
                    session_id=f"s{sess + 1}",
                    problem_index=p,
                    label=label,
                    fps=float(spec.fps),
                    psi=np.round(psi, spec.decimals),
                    rho=np.round(rho, spec.decimals),
                    xi=np.round(xi, spec.decimals),
                ))
    header = DatasetHeader(dim_psi=spec.dim_psi, dim_rho=spec.dim_rho, dim_xi=spec.dim_xi)
    return header, segments


def generate_file(spec: SyntheticSpec, path) -> tuple[DatasetHeader, list[Segment]]:
    header, segments = generate(spec)
    write_dataset(path, header, segments)
    return header, segments


def describe(header: DatasetHeader | None, segments) -> dict:
    """Summary counts in the shape of a dataset-size table."""
    segments = list(segments)
    hist = {name: 0 for name in LABEL_NAMES}
    for s in segments:
        hist[LABEL_NAMES[s.label]] += 1
    lengths = np.array([s.n_frames for s in segments], dtype=np.int64)
    out = {
        "n_users": len({s.user_id for s in segments}),
        "n_sessions": len({(s.user_id, s.session_id) for s in segments}),
        "n_segments": len(segments),
        "label_histogram": hist,
        "frames": {
            "total": int(lengths.sum()) if lengths.size else 0,
            "min": int(lengths.min()) if lengths.size else 0,
            "max": int(lengths.max()) if lengths.size else 0,
            "mean": float(lengths.mean()) if lengths.size else 0.0,
        },
    }
    if header is not None:
        out["dims"] = {"psi": header.dim_psi, "rho": header.dim_rho, "xi": header.dim_xi}
    return out
