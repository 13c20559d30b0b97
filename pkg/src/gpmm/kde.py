"""Mixture of single-scan GP models: build, sample, recognize.

Each scan gets its own low-rank model; the mixture holds them with
normalized weights. Components do not need a shared topology, so the
mixture doubles as a prior over heads without dense correspondence.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .kernels import kernel_recipe
from .lowrank import (
    LatentCode,
    MorphableModel,
    NystromConfig,
    build_gp_model,
    latent_cosine,
    load_model,
    sample,
    save_model,
)
from .mesh import Mesh
from .rng import substream

MIXTURE_VERSION = 1


@dataclass(frozen=True)
class MixtureModel:
    components: tuple
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise DataError("mixture needs at least one component")
        for i, c in enumerate(comps):
            if not isinstance(c, MorphableModel):
                raise DataError(f"component {i} is not a model")
        if self.weights is None:
            w = np.full(len(comps), 1.0 / len(comps))
        else:
            w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(comps),):
            raise DataError(
                f"{len(comps)} components but {w.size} weights"
            )
        if not np.all(np.isfinite(w)) or np.any(w < 0.0):
            raise DataError("weights must be finite and nonnegative")
        total = float(w.sum())
        if total <= 0.0:
            raise DataError("weights sum to zero")
        w = w / total
        w.setflags(write=False)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)

    @property
    def n_components(self) -> int:
        return len(self.components)


def build_mixture(templates, recipe=None, config: NystromConfig = None,
                  seed: int = 0) -> MixtureModel:
    """One GP model per template, uniform weights.

    Every component is built with the same seed; the templates themselves
    make the components distinct.
    """
    templates = list(templates)
    if not templates:
        raise DataError("mixture needs at least one template")
    if recipe is None:
        recipe = kernel_recipe("standard-full")
    components = []
    for i, template in enumerate(templates):
        try:
            components.append(build_gp_model(template, recipe, config, seed=seed))
        except Exception as exc:
            raise type(exc)(f"component {i}: {exc}") from exc
    return MixtureModel(tuple(components))


def sample_mixture(mixture: MixtureModel, seed: int, index: int = 0):
    """Draw `index` for `seed`: pick a component by weight, then sample it.

    Component selection and the draw use separate substreams so that a
    point-mass mixture reproduces the chosen component's own seeded
    draws exactly.

    Returns (component_index, code, mesh).
    """
    pick = substream(seed, f"kde.component.{index}")
    which = int(np.searchsorted(np.cumsum(mixture.weights), pick.random(),
                                side="right"))
    which = min(which, mixture.n_components - 1)
    code, mesh = sample(mixture.components[which],
                        substream(seed, f"sample.{index}"))
    return which, code, mesh


@dataclass(frozen=True)
class RecognitionResult:
    identity: int
    similarity: float
    component: int
    low_confidence: bool
    scores: tuple  # per-identity best similarity


def recognize_mixture(mixture: MixtureModel, probe_fits,
                      gallery_fits) -> RecognitionResult:
    """Identity whose gallery fit lies at the smallest cosine angle.

    probe_fits: one LatentCode per component. gallery_fits: per identity,
    one LatentCode per component. The score of an identity is its best
    similarity over components; ties go to the lowest identity index.
    A best score <= 0 is flagged low-confidence.
    """
    m = mixture.n_components
    probe_fits = list(probe_fits)
    if len(probe_fits) != m:
        raise DataError(
            f"probe has {len(probe_fits)} fits for {m} components"
        )
    gallery_fits = [list(g) for g in gallery_fits]
    if not gallery_fits:
        raise DataError("empty gallery")
    for gi, fits in enumerate(gallery_fits):
        if len(fits) != m:
            raise DataError(
                f"gallery identity {gi} has {len(fits)} fits for {m} components"
            )
        for ci, fit in enumerate(fits):
            if fit is None:
                raise DataError(
                    f"missing fit for identity {gi}, component {ci}"
                )

    scores = []
    arg_component = []
    for fits in gallery_fits:
        sims = [latent_cosine(probe_fits[c], fits[c]) for c in range(m)]
        best = int(np.argmax(sims))
        arg_component.append(best)
        scores.append(sims[best])
    identity = int(np.argmax(scores))  # argmax takes the first maximum
    best = scores[identity]
    return RecognitionResult(
        identity=identity,
        similarity=float(best),
        component=arg_component[identity],
        low_confidence=bool(best <= 0.0),
        scores=tuple(float(s) for s in scores),
    )


# -- mixture archive --------------------------------------------------------


def _component_name(manifest_path: str, index: int) -> str:
    stem = os.path.basename(manifest_path)
    if stem.endswith(".json"):
        stem = stem[: -len(".json")]
    return f"{stem}.component{index:03d}.zip"


def save_mixture(mixture: MixtureModel, path):
    """Manifest JSON plus one model archive per component next to it."""
    path = os.fspath(path)
    names = []
    for i, component in enumerate(mixture.components):
        name = _component_name(path, i)
        save_model(component, os.path.join(os.path.dirname(path) or ".", name))
        names.append(name)
    manifest = {
        "format_version": MIXTURE_VERSION,
        "kind": "kde-mixture",
        "weights": [float(w) for w in mixture.weights],
        "components": names,
    }
    payload = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_mixture(path) -> MixtureModel:
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a mixture manifest ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("kind") != "kde-mixture":
        raise DataError(f"{path}: not a mixture manifest")
    version = manifest.get("format_version")
    if version is None:
        raise DataError(f"{path}: manifest missing format_version")
    if version > MIXTURE_VERSION:
        raise DataError(
            f"{path}: format_version {version} is newer than supported "
            f"{MIXTURE_VERSION}"
        )
    names = manifest.get("components")
    weights = manifest.get("weights")
    if not names:
        raise DataError(f"{path}: manifest lists no components")
    base = os.path.dirname(path) or "."
    components = []
    for i, name in enumerate(names):
        member = os.path.join(base, name)
        if not os.path.exists(member):
            raise DataError(f"{path}: component {i} missing ({name})")
        components.append(load_model(member))
    return MixtureModel(tuple(components), np.asarray(weights, dtype=np.float64))
