"""The frozen desk-scale benchmark: one overfit target model, its probes, and a shadow.

Built in three stages that the CLI also runs one at a time: ``synthesize``
draws features and named splits, ``train_models`` fits the target and the
shadow, ``probe_all`` queries the target to produce every probe set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from diffmi.baselines import ShadowArtifacts, build_shadow
from diffmi.data import ProbeDataset
from diffmi.errors import ValidationError
from diffmi.nonmember import NoiseSpec, generate_random, perturb_random
from diffmi.toy import SyntheticSpec, ToyModel, make_synthetic_dataset, predict_proba, stratified_split, train_model

GENERATION_METHODS = ("perturb", "random")
BASE_SPLITS = ("target_train", "target_holdout", "shadow_train", "shadow_holdout")


def _standard_synthetic() -> SyntheticSpec:
    return SyntheticSpec(num_classes=10, dim=20, samples_per_class=100, cluster_spread=0.8, label_noise=0.3)


@dataclass(frozen=True)
class BenchmarkSpec:
    """Everything that defines one benchmark draw except the seed.

    ``extra_nonmember_factor`` draws that many additional held-out sets
    (each the size of the training set) so ratio sweeps have a large
    enough nonmember pool.
    """

    synthetic: SyntheticSpec = field(default_factory=_standard_synthetic)
    architecture: str = "mlp"
    epochs: int = 2000
    lr: float = 2.0
    generation: str = "perturb"
    perturb_variance: float = 0.25
    generated_size: int = 1000
    reference_size: int = 1000
    extra_nonmember_factor: int = 0
    with_shadow: bool = True

    def __post_init__(self):
        if self.generation not in GENERATION_METHODS:
            raise ValidationError(f"unknown generation method {self.generation!r}")
        if self.extra_nonmember_factor < 0:
            raise ValidationError("extra_nonmember_factor must be >= 0")
        if self.epochs < 1 or not self.lr > 0:
            raise ValidationError("epochs must be >= 1 and lr > 0")
        if self.generated_size < 1 or self.reference_size < 1:
            raise ValidationError("generated_size and reference_size must be positive")
        if not self.perturb_variance > 0:
            raise ValidationError("perturb_variance must be > 0")


@dataclass
class SynthData:
    features: np.ndarray
    labels: np.ndarray
    clean_labels: np.ndarray
    split: np.ndarray  # split name per row

    def rows(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.split == name)


@dataclass
class Benchmark:
    target: ProbeDataset          # members + held-out nonmembers, with ground truth
    generated: ProbeDataset       # attacker-generated nonmembers (diff-w/ and 1class)
    reference: ProbeDataset       # uniformly random probes (top-1 threshold)
    shadow: Optional[ShadowArtifacts]
    model: ToyModel
    nonmember_pool: ProbeDataset  # every held-out record available for subsampling
    meta: dict = field(default_factory=dict)

    @property
    def members(self) -> ProbeDataset:
        return ProbeDataset([r for r in self.target if r.is_member], self.target.num_classes)


def synthesize(spec: BenchmarkSpec, seed: int) -> SynthData:
    syn = replace(spec.synthetic, seed=seed)
    parts = len(BASE_SPLITS) + spec.extra_nonmember_factor
    X, y, clean = make_synthetic_dataset(syn, copies=parts)
    names = list(BASE_SPLITS) + [f"extra_holdout_{i}" for i in range(spec.extra_nonmember_factor)]
    split = np.empty(len(y), dtype=object)
    for name, idx in zip(names, stratified_split(clean, parts, seed=seed)):
        split[idx] = name
    return SynthData(X, y, clean, split.astype(str))


def train_models(spec: BenchmarkSpec, data: SynthData, seed: int):
    """The target model and, when requested, a shadow trained with a different seed."""
    m = spec.synthetic.num_classes
    tr, s_tr = data.rows("target_train"), data.rows("shadow_train")
    model = train_model(data.features[tr], data.labels[tr], spec.architecture, spec.epochs, spec.lr, seed=seed, num_classes=m)
    shadow = None
    if spec.with_shadow:
        shadow = train_model(
            data.features[s_tr], data.labels[s_tr], spec.architecture, spec.epochs, spec.lr, seed=seed + 1, num_classes=m
        )
    return model, shadow


def probe_all(spec: BenchmarkSpec, data: SynthData, model: ToyModel, shadow_model: Optional[ToyModel],
              seed: int) -> Benchmark:
    X, y = data.features, data.labels
    tr, ho = data.rows("target_train"), data.rows("target_holdout")
    extra = np.flatnonzero(np.char.startswith(data.split, "extra_holdout_"))

    rng = np.random.default_rng(seed + 7919)
    idx = np.r_[tr, ho]
    member = np.r_[np.ones(len(tr), dtype=bool), np.zeros(len(ho), dtype=bool)]
    perm = rng.permutation(len(idx))
    idx, member = idx[perm], member[perm]
    target = predict_proba(model, X[idx], ids=[f"t{i:05d}" for i in range(len(idx))], labels=y[idx], is_member=member)

    pool_idx = np.r_[ho, extra]
    pool = predict_proba(
        model, X[pool_idx], ids=[f"h{i:05d}" for i in range(len(pool_idx))], labels=y[pool_idx],
        is_member=np.zeros(len(pool_idx), dtype=bool),
    )

    # generated nonmembers start from target samples the attacker already holds
    src = rng.choice(len(idx), size=spec.generated_size, replace=True)
    dim = X.shape[1]
    if spec.generation == "perturb":
        noise = NoiseSpec("gaussian", variance=spec.perturb_variance)
        G = np.vstack([perturb_random(X[idx[s]], noise, seed=seed * 100_003 + j, clip=False) for j, s in enumerate(src)])
    else:
        G = np.vstack([generate_random(dim, seed * 100_003 + j).features for j in range(spec.generated_size)])
    generated = predict_proba(model, G, ids=[f"g{i:05d}" for i in range(len(G))], labels=y[idx[src]])

    R = np.vstack([generate_random(dim, seed * 100_003 + 50_000 + j).features for j in range(spec.reference_size)])
    reference = predict_proba(model, R, ids=[f"r{i:05d}" for i in range(len(R))])

    shadow = None
    if shadow_model is not None:
        s_tr, s_ho = data.rows("shadow_train"), data.rows("shadow_holdout")
        shadow = build_shadow(shadow_model, X[s_tr], y[s_tr], X[s_ho], y[s_ho])

    meta = {
        "seed": seed,
        "train_accuracy": model.meta.get("train_accuracy"),
        "holdout_accuracy": float(np.mean(np.argmax(model.logits(X[ho]), axis=1) == y[ho])),
    }
    return Benchmark(target, generated, reference, shadow, model, pool, meta)


def build_benchmark(spec: BenchmarkSpec = BenchmarkSpec(), seed: int = 0) -> Benchmark:
    data = synthesize(spec, seed)
    model, shadow_model = train_models(spec, data, seed)
    return probe_all(spec, data, model, shadow_model, seed)


def compose_target(bench: Benchmark, ratio: float, n_members: int, seed: int) -> ProbeDataset:
    """A target set with ``n_members`` members and ``ratio * n_members`` nonmembers."""
    members = bench.members
    n_non = int(round(ratio * n_members))
    if n_members > len(members) or n_non > len(bench.nonmember_pool):
        raise ValidationError(
            f"pool too small for ratio {ratio}: need {n_members} members and {n_non} nonmembers, "
            f"have {len(members)} and {len(bench.nonmember_pool)}"
        )
    rng = np.random.default_rng(seed)
    mem = [members[i] for i in np.sort(rng.choice(len(members), n_members, replace=False))]
    non = [bench.nonmember_pool[i] for i in np.sort(rng.choice(len(bench.nonmember_pool), n_non, replace=False))]
    recs = mem + non
    order = rng.permutation(len(recs))
    return ProbeDataset([recs[i] for i in order], bench.target.num_classes)
