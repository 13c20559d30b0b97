"""Command-line entry point wiring the whole pipeline.

Every command resolves its configuration from flags, then `GPMM_*`
environment variables, then an optional TOML file, and finishes by
writing a run manifest next to its outputs: command name, the resolved
parameters, sha256 of every input and output, seed, version and timing.
`gpmm replay` re-executes a manifest and verifies the outputs match
bit for bit.

Exit codes: 0 ok, 2 usage, 3 data error, 4 numerical failure.
"""
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from . import __version__
from .errors import (DataError, FitAbortError, GpmmError, MeshFormatError,
                     NumericalError, TopologyError)
from .inference import FitConfig, ProposalConfig, fit_image, recognize
from .kde import (build_mixture, load_mixture, recognize_mixture,
                  sample_mixture, save_mixture)
from .kernels import RECIPE_NAMES, kernel_recipe
from .learn import LearnConfig, LearnImage, flip_augment, run_learning
from .lowrank import (LatentCode, NystromConfig, build_gp_model, draw_sample,
                      instance, latent_cosine, load_model, save_model)
from .mesh import LandmarkSet
from .metrics import compactness, curves_to_svg, generalization, specificity
from .meshfile import (load_landmarks, load_mesh, load_observations,
                       save_mesh)
from .registration import RegistrationConfig, build_pca_model, register
from .render import load_image, load_scene, rasterize, save_image, save_scene

_USAGE, _DATA, _NUMERIC = 2, 3, 4


# -- manifest plumbing ------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path, payload: bytes):
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, str(path))


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_manifest(command: str, params: dict, inputs, outputs,
                   seed, started: str, t0: float, manifest_path) -> dict:
    """Record one run next to its outputs; returns the manifest dict.

    Output paths are stored relative to the manifest so a replayed run
    in another directory lines up file by file.
    """
    root = Path(manifest_path).parent
    doc = {
        "kind": "gpmm-run",
        "command": command,
        "config": params,
        "seed": seed,
        "version": __version__,
        "wall_clock": {"started_utc": started,
                       "elapsed_seconds": round(time.time() - t0, 3)},
        "inputs": {str(p): _sha256(p) for p in sorted(map(str, inputs))},
        "outputs": [
            {"path": os.path.relpath(str(p), root), "sha256": _sha256(p)}
            for p in map(str, outputs)
        ],
    }
    _atomic_write(manifest_path,
                  (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    return doc


def _finish(command, params, inputs, outputs, seed, started, t0,
            manifest_path):
    write_manifest(command, params, inputs, outputs, seed, started, t0,
                   manifest_path)
    click.echo(f"wrote {len(outputs)} file(s); manifest: {manifest_path}")


# -- shared parsing ---------------------------------------------------------

def _parse_override(pairs) -> dict:
    """`key=value` kernel overrides; commas make float tuples."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.UsageError(f"--set needs key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        raw = raw.strip()
        if "," in raw:
            try:
                out[key.strip()] = tuple(float(v) for v in raw.split(","))
            except ValueError:
                raise click.UsageError(f"--set {key}: bad tuple {raw!r}")
        else:
            try:
                out[key.strip()] = float(raw)
            except ValueError:
                out[key.strip()] = raw
    return out


def _recipe_from(params: dict):
    try:
        return kernel_recipe(params["kernel"], **_parse_override(params["set"]))
    except DataError as exc:
        if "unknown kernel recipe" in str(exc):
            raise click.UsageError(str(exc)) from None
        raise


def _nystrom_from(params: dict) -> NystromConfig:
    kwargs = {k: params[k] for k in ("shape_landmarks", "albedo_landmarks",
                                     "shape_rank", "albedo_rank")
              if params.get(k) is not None}
    return NystromConfig(**kwargs)


def _fit_config_from(params: dict) -> FitConfig:
    kwargs = {}
    for key in ("n_illumination_steps", "n_full_steps", "landmark_sigma",
                "foreground_sigma", "illumination_refresh", "seed"):
        if params.get(key) is not None:
            kwargs[key] = params[key]
    return FitConfig(**kwargs)


def _code_to_dict(code: LatentCode) -> dict:
    return {"shape": [float(v) for v in code.shape],
            "albedo": [float(v) for v in code.albedo]}


def _code_from_dict(doc) -> LatentCode:
    return LatentCode(np.asarray(doc["shape"], float),
                      np.asarray(doc["albedo"], float))


def _load_fit_code(path) -> LatentCode:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return _code_from_dict(doc["code"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a fit result ({exc})") from None


def _dataset_meshes(directory):
    paths = sorted(Path(directory).glob("*.ply"))
    if not paths:
        raise DataError(f"{directory}: no .ply meshes found")
    return paths, [load_mesh(p) for p in paths]


def _landmark_set(params: dict):
    if not params.get("landmarks"):
        return None, []
    inputs = [params["landmarks"]]
    entries = load_landmarks(params["landmarks"]).entries
    obs = []
    if params.get("observations"):
        obs = load_observations(params["observations"])
        inputs.append(params["observations"])
    return LandmarkSet(entries=entries, observations=obs), inputs


# -- command implementations (shared by replay) ----------------------------

def _do_build(params):
    recipe = _recipe_from(params)
    template = load_mesh(params["template"])
    model = build_gp_model(template, recipe, _nystrom_from(params),
                           seed=params["seed"])
    out = Path(params["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    return [params["template"]], [out], out.parent / (out.name + ".manifest.json")


def _do_sample(params):
    model = load_model(params["model"])
    out_dir = Path(params["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i in range(params["count"]):
        _, mesh = draw_sample(model, params["seed"], index=i)
        path = out_dir / f"sample-{i:03d}.ply"
        save_mesh(mesh, path)
        outputs.append(path)
    return [params["model"]], outputs, out_dir / "sample.manifest.json"


def _do_metrics(params):
    model = load_model(params["model"])
    paths, meshes = _dataset_meshes(params["dataset"])
    channel = params["channel"]
    rank = model.shape_rank if channel == "shape" else model.albedo_rank
    counts = list(range(0, rank + 1))
    curves = {
        "generalization": generalization(model, meshes, counts, channel),
        "specificity": specificity(model, meshes, counts,
                                   samples=params["samples"],
                                   seed=params["seed"], channel=channel),
        "compactness": compactness(model, counts, channel),
    }
    lines = ["metric,component_count,value"]
    for name, curve in curves.items():
        for c, v in zip(curve.counts, curve.values):
            lines.append(f"{name},{c},{v!r}")
    out = Path(params["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(out, ("\n".join(lines) + "\n").encode())
    outputs = [out]
    if params.get("svg"):
        svg = Path(params["svg"])
        _atomic_write(svg, curves_to_svg(list(curves.values()),
                                         title=f"{channel} metrics").encode())
        outputs.append(svg)
    return [params["model"], *paths], outputs, out.parent / (out.name + ".manifest.json")


def _do_fit(params):
    model = load_model(params["model"])
    image = load_image(params["image"])
    inputs = [params["model"], params["image"]]
    landmarks, lm_inputs = _landmark_set(params)
    inputs += lm_inputs
    init = None
    if params.get("init"):
        init = load_scene(params["init"])
        inputs.append(params["init"])
    cfg = _fit_config_from(params)
    best, trace = fit_image(model, image, landmarks=landmarks, init=init,
                            cfg=cfg)
    out_dir = Path(params["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    pose = best.scene.pose
    result = {
        "kind": "gpmm-fit",
        "code": _code_to_dict(best.code),
        "pose": {"yaw": pose.yaw, "pitch": pose.pitch, "roll": pose.roll,
                 "translation": [float(v) for v in pose.translation]},
        "log_posterior": best.log_posterior,
        "iteration": best.iteration,
        "total_steps": trace.total_steps,
    }
    fit_path = out_dir / "fit.json"
    _atomic_write(fit_path,
                  (json.dumps(result, indent=2, sort_keys=True) + "\n").encode())
    scene_path = out_dir / "scene.json"
    save_scene(scene_path, best.scene)
    render_path = out_dir / "render.png"
    save_image(render_path, rasterize(instance(model, best.code),
                                      best.scene).color)
    return inputs, [fit_path, scene_path, render_path], out_dir / "fit.manifest.json"


def _do_recognize(params):
    probe = _load_fit_code(params["probe"])
    gallery_paths = sorted(Path(params["gallery"]).glob("*.json"))
    gallery_paths = [p for p in gallery_paths
                     if not p.name.endswith("manifest.json")]
    if not gallery_paths:
        raise DataError(f"{params['gallery']}: no fit results found")
    gallery = [(p.stem, _load_fit_code(p)) for p in gallery_paths]
    identity = recognize(probe, gallery)
    scores = {name: latent_cosine(probe, code) for name, code in gallery}
    result = {"kind": "gpmm-recognition", "identity": identity,
              "scores": scores}
    out = Path(params["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(out,
                  (json.dumps(result, indent=2, sort_keys=True) + "\n").encode())
    click.echo(f"identity: {identity}")
    for name, sim in sorted(scores.items(), key=lambda kv: -kv[1]):
        click.echo(f"  {name}: {sim:.4f}")
    inputs = [params["probe"], *gallery_paths]
    return inputs, [out], out.parent / (out.name + ".manifest.json")


def _do_register(params):
    model = load_model(params["model"])
    target = load_mesh(params["target"])
    cfg = RegistrationConfig(mode=params["mode"], steps=params["steps"],
                             seed=params["seed"])
    mesh, code, diagnostics = register(model, target, cfg)
    out = Path(params["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, out)
    diag_path = out.with_suffix(".json")
    doc = {"kind": "gpmm-registration", "code": _code_to_dict(code),
           "diagnostics": diagnostics}
    _atomic_write(diag_path,
                  (json.dumps(doc, indent=2, sort_keys=True, default=float)
                   + "\n").encode())
    return ([params["model"], params["target"]], [out, diag_path],
            out.parent / (out.name + ".manifest.json"))


def _do_pca_build(params):
    paths, meshes = _dataset_meshes(params["dataset"])
    model = build_pca_model(meshes, tolerance=params["tolerance"])
    out = Path(params["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    return paths, [out], out.parent / (out.name + ".manifest.json")


def _do_kde_build(params):
    recipe = _recipe_from(params)
    templates = [load_mesh(p) for p in params["templates"]]
    mixture = build_mixture(templates, recipe, _nystrom_from(params),
                            seed=params["seed"])
    out = Path(params["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mixture(mixture, out)
    outputs = [out] + [out.parent / name for name in
                       json.loads(out.read_text())["components"]]
    return list(params["templates"]), outputs, out.parent / (out.name + ".manifest.json")


def _do_kde_sample(params):
    mixture = load_mixture(params["mixture"])
    out_dir = Path(params["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    rows = []
    for i in range(params["count"]):
        which, _, mesh = sample_mixture(mixture, params["seed"], index=i)
        path = out_dir / f"sample-{i:03d}.ply"
        save_mesh(mesh, path)
        outputs.append(path)
        rows.append({"index": i, "component": which, "path": path.name})
    table = out_dir / "components.json"
    _atomic_write(table,
                  (json.dumps(rows, indent=2) + "\n").encode())
    outputs.append(table)
    inputs = [params["mixture"]]
    doc = json.loads(Path(params["mixture"]).read_text())
    inputs += [str(Path(params["mixture"]).parent / n)
               for n in doc.get("components", [])]
    return inputs, outputs, out_dir / "kde-sample.manifest.json"


def _do_kde_recognize(params):
    mixture = load_mixture(params["mixture"])

    def load_fits(path):
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return [_code_from_dict(d) for d in doc["fits"]]

    probe = load_fits(params["probe"])
    gallery_paths = sorted(Path(params["gallery"]).glob("*.json"))
    gallery_paths = [p for p in gallery_paths
                     if not p.name.endswith("manifest.json")]
    if not gallery_paths:
        raise DataError(f"{params['gallery']}: no gallery fits found")
    gallery = [load_fits(p) for p in gallery_paths]
    result = recognize_mixture(mixture, probe, gallery)
    doc = {
        "kind": "gpmm-kde-recognition",
        "identity": gallery_paths[result.identity].stem,
        "identity_index": result.identity,
        "similarity": result.similarity,
        "component": result.component,
        "low_confidence": result.low_confidence,
        "scores": {p.stem: s for p, s in zip(gallery_paths, result.scores)},
    }
    out = Path(params["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(out,
                  (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    click.echo(f"identity: {doc['identity']} "
               f"(similarity {result.similarity:.4f})")
    inputs = [params["mixture"], params["probe"], *gallery_paths]
    mix_doc = json.loads(Path(params["mixture"]).read_text())
    inputs += [str(Path(params["mixture"]).parent / n)
               for n in mix_doc.get("components", [])]
    return inputs, [out], out.parent / (out.name + ".manifest.json")


def _do_learn(params):
    model = load_model(params["model"])
    image_paths = sorted(Path(params["images"]).glob("*.png"))
    if not image_paths:
        raise DataError(f"{params['images']}: no .png images found")
    inputs = [params["model"], *image_paths]
    entries = []
    if params.get("landmarks"):
        entries = load_landmarks(params["landmarks"]).entries
        inputs.append(params["landmarks"])
    images = []
    for path in image_paths:
        pixels = load_image(path)
        landmarks = None
        obs_path = path.with_suffix(".obs.csv")
        if entries and obs_path.exists():
            landmarks = LandmarkSet(entries=entries,
                                    observations=load_observations(obs_path))
            inputs.append(obs_path)
        init = None
        scene_path = path.with_suffix(".scene.json")
        if scene_path.exists():
            init = load_scene(scene_path)
            inputs.append(scene_path)
        images.append(LearnImage(pixels, landmarks, init, name=path.stem))
    if params["flip"]:
        images = flip_augment(images)
    cfg = LearnConfig(
        iterations=params["iterations"],
        silhouette_iou_min=params["silhouette_iou_min"],
        albedo_drift_base=params["drift_base"],
        albedo_drift_decay=params["drift_decay"],
        denoise_threshold=params["denoise_threshold"],
        fit=_fit_config_from(params),
    )
    out_dir = Path(params["out_dir"])
    run_learning(model, images, cfg, out_dir)
    outputs = sorted(out_dir.glob("model-iter-*.npz"))
    outputs += sorted(out_dir.glob("report-iter-*.json"))
    return inputs, outputs, out_dir / "learn.manifest.json"


_COMMANDS = {
    "build": _do_build,
    "sample": _do_sample,
    "metrics": _do_metrics,
    "fit": _do_fit,
    "recognize": _do_recognize,
    "register": _do_register,
    "pca-build": _do_pca_build,
    "kde build": _do_kde_build,
    "kde sample": _do_kde_sample,
    "kde recognize": _do_kde_recognize,
    "learn": _do_learn,
}

# manifest config keys that point at outputs, per command
_OUTPUT_KEYS = {
    "build": ("out",), "sample": ("out_dir",), "metrics": ("out", "svg"),
    "fit": ("out_dir",), "recognize": ("out",), "register": ("out",),
    "pca-build": ("out",), "kde build": ("out",), "kde sample": ("out_dir",),
    "kde recognize": ("out",), "learn": ("out_dir",),
}


def _execute(command, params):
    started, t0 = _utc_now(), time.time()
    fn = _COMMANDS[command]
    inputs, outputs, manifest_path = fn(params)
    _finish(command, params, inputs, outputs, params.get("seed", 0),
            started, t0, manifest_path)


# -- click wiring -----------------------------------------------------------

class _Group(click.Group):
    def main(self, *args, **kwargs):
        kwargs.setdefault("auto_envvar_prefix", "GPMM")
        return super().main(*args, **kwargs)


@click.group(cls=_Group)
@click.option("--config", type=click.Path(exists=True, dir_okay=False),
              default=None, help="TOML file with per-command defaults.")
@click.option("--json-errors", is_flag=True, default=False,
              help="Report failures as JSON on stderr.")
@click.version_option(version=__version__, prog_name="gpmm")
@click.pass_context
def cli(ctx, config, json_errors):
    """Gaussian process morphable models from a single template mesh."""
    if config:
        with open(config, "rb") as fh:
            ctx.default_map = tomllib.load(fh)
    ctx.ensure_object(dict)
    ctx.obj["json_errors"] = json_errors


def _kernel_options(fn):
    fn = click.option("--kernel", default="standard-full",
                      help=f"One of: {', '.join(RECIPE_NAMES)}.")(fn)
    fn = click.option("--set", "set_", multiple=True, metavar="KEY=VALUE",
                      help="Kernel parameter override; commas make tuples.")(fn)
    fn = click.option("--shape-landmarks", type=int, default=None)(fn)
    fn = click.option("--albedo-landmarks", type=int, default=None)(fn)
    fn = click.option("--shape-rank", type=int, default=None)(fn)
    fn = click.option("--albedo-rank", type=int, default=None)(fn)
    return fn


def _fit_options(fn):
    fn = click.option("--n1", "n_illumination_steps", type=int, default=None,
                      help="Illumination-only steps.")(fn)
    fn = click.option("--n2", "n_full_steps", type=int, default=None,
                      help="Full MH steps.")(fn)
    fn = click.option("--landmark-sigma", type=float, default=None)(fn)
    fn = click.option("--foreground-sigma", type=float, default=None)(fn)
    fn = click.option("--illumination-refresh", type=int, default=None)(fn)
    return fn


@cli.command()
@click.option("--template", required=True,
              type=click.Path(exists=True, dir_okay=False))
@_kernel_options
@click.option("--seed", type=int, default=0)
@click.option("--out", default="model.npz", type=click.Path())
def build(template, kernel, set_, shape_landmarks, albedo_landmarks,
          shape_rank, albedo_rank, seed, out):
    """Build a GP morphable model from a template mesh."""
    _execute("build", {
        "template": template, "kernel": kernel, "set": list(set_),
        "shape_landmarks": shape_landmarks,
        "albedo_landmarks": albedo_landmarks,
        "shape_rank": shape_rank, "albedo_rank": albedo_rank,
        "seed": seed, "out": out,
    })


@cli.command()
@click.option("--model", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--count", type=int, default=1)
@click.option("--seed", type=int, default=0)
@click.option("--out-dir", default="samples", type=click.Path())
def sample(model, count, seed, out_dir):
    """Draw seeded model samples as PLY meshes."""
    if count < 1:
        raise click.UsageError("--count must be at least 1")
    _execute("sample", {"model": model, "count": count, "seed": seed,
                        "out_dir": out_dir})


@cli.command()
@click.option("--model", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--channel", type=click.Choice(["shape", "albedo"]),
              default="shape")
@click.option("--samples", type=int, default=200,
              help="Specificity sample count.")
@click.option("--seed", type=int, default=0)
@click.option("--out", default="metrics.csv", type=click.Path())
@click.option("--svg", default=None, type=click.Path(),
              help="Also write an SVG plot.")
def metrics(model, dataset, channel, samples, seed, out, svg):
    """Specificity, generalization and compactness curves as CSV."""
    _execute("metrics", {"model": model, "dataset": dataset,
                         "channel": channel, "samples": samples,
                         "seed": seed, "out": out, "svg": svg})


@cli.command()
@click.option("--model", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--image", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--landmarks", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="CSV of name,vertex_id template landmarks.")
@click.option("--observations", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="CSV of name,x,y[,sigma] image observations.")
@click.option("--init", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Scene JSON to start from.")
@_fit_options
@click.option("--seed", type=int, default=0)
@click.option("--out-dir", default="fit", type=click.Path())
def fit(model, image, landmarks, observations, init, n_illumination_steps,
        n_full_steps, landmark_sigma, foreground_sigma, illumination_refresh,
        seed, out_dir):
    """Fit pose, shape, albedo and illumination to one image."""
    if observations and not landmarks:
        raise click.UsageError("--observations needs --landmarks")
    _execute("fit", {
        "model": model, "image": image, "landmarks": landmarks,
        "observations": observations, "init": init,
        "n_illumination_steps": n_illumination_steps,
        "n_full_steps": n_full_steps, "landmark_sigma": landmark_sigma,
        "foreground_sigma": foreground_sigma,
        "illumination_refresh": illumination_refresh,
        "seed": seed, "out_dir": out_dir,
    })


@cli.command("recognize")
@click.option("--gallery", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Directory of fit.json results; file stem = identity.")
@click.option("--probe", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default="recognition.json", type=click.Path())
def recognize_cmd(gallery, probe, out):
    """Rank gallery identities by latent cosine similarity."""
    _execute("recognize", {"gallery": gallery, "probe": probe, "out": out})


@cli.command("register")
@click.option("--model", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--target", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["shape-only", "shape-and-albedo"]),
              default="shape-only")
@click.option("--steps", type=int, default=4000)
@click.option("--seed", type=int, default=0)
@click.option("--out", default="registered.ply", type=click.Path())
def register_cmd(model, target, mode, steps, seed, out):
    """Register the model to a target scan (MAP over code and pose)."""
    _execute("register", {"model": model, "target": target, "mode": mode,
                          "steps": steps, "seed": seed, "out": out})


@cli.command("pca-build")
@click.option("--dataset", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Directory of registered .ply meshes, shared topology.")
@click.option("--tolerance", type=float, default=1e-9)
@click.option("--out", default="pca-model.npz", type=click.Path())
def pca_build(dataset, tolerance, out):
    """Build a PCA morphable model from registered meshes."""
    _execute("pca-build", {"dataset": dataset, "tolerance": tolerance,
                           "seed": 0, "out": out})


@cli.group()
def kde():
    """Mixture-of-models commands."""


@kde.command("build")
@click.option("--template", "templates", multiple=True, required=True,
              type=click.Path(exists=True, dir_okay=False))
@_kernel_options
@click.option("--seed", type=int, default=0)
@click.option("--out", default="mixture.json", type=click.Path())
def kde_build(templates, kernel, set_, shape_landmarks, albedo_landmarks,
              shape_rank, albedo_rank, seed, out):
    """Build one GP model per template, mixed uniformly."""
    _execute("kde build", {
        "templates": list(templates), "kernel": kernel, "set": list(set_),
        "shape_landmarks": shape_landmarks,
        "albedo_landmarks": albedo_landmarks,
        "shape_rank": shape_rank, "albedo_rank": albedo_rank,
        "seed": seed, "out": out,
    })


@kde.command("sample")
@click.option("--mixture", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--count", type=int, default=1)
@click.option("--seed", type=int, default=0)
@click.option("--out-dir", default="kde-samples", type=click.Path())
def kde_sample(mixture, count, seed, out_dir):
    """Draw mixture samples; records which component drew each."""
    if count < 1:
        raise click.UsageError("--count must be at least 1")
    _execute("kde sample", {"mixture": mixture, "count": count,
                            "seed": seed, "out_dir": out_dir})


@kde.command("recognize")
@click.option("--mixture", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--probe", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help='JSON {"fits": [{"shape": [...], "albedo": [...]}, ...]},'
                   " one entry per component.")
@click.option("--gallery", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Directory of per-identity fit JSONs in the same format.")
@click.option("--out", default="kde-recognition.json", type=click.Path())
def kde_recognize(mixture, probe, gallery, out):
    """Recognize a probe against a gallery under the mixture."""
    _execute("kde recognize", {"mixture": mixture, "probe": probe,
                               "gallery": gallery, "out": out})


@cli.command()
@click.option("--model", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--images", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Directory of .png images; optional per-image "
                   "<stem>.scene.json inits and <stem>.obs.csv observations.")
@click.option("--landmarks", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Template landmark CSV shared by all observations.")
@click.option("--iterations", type=int, default=1)
@click.option("--silhouette-iou-min", type=float, default=0.625)
@click.option("--drift-base", type=float, default=8.0)
@click.option("--drift-decay", type=float, default=0.5)
@click.option("--denoise-threshold", type=float, default=10.0)
@click.option("--flip/--no-flip", default=False,
              help="Mirror images (and hints) to double the set.")
@_fit_options
@click.option("--seed", type=int, default=0)
@click.option("--out-dir", default="learned", type=click.Path())
def learn(model, images, landmarks, iterations, silhouette_iou_min,
          drift_base, drift_decay, denoise_threshold, flip,
          n_illumination_steps, n_full_steps, landmark_sigma,
          foreground_sigma, illumination_refresh, seed, out_dir):
    """Iteratively refit and rebuild the model from images."""
    _execute("learn", {
        "model": model, "images": images, "landmarks": landmarks,
        "iterations": iterations, "silhouette_iou_min": silhouette_iou_min,
        "drift_base": drift_base, "drift_decay": drift_decay,
        "denoise_threshold": denoise_threshold, "flip": flip,
        "n_illumination_steps": n_illumination_steps,
        "n_full_steps": n_full_steps, "landmark_sigma": landmark_sigma,
        "foreground_sigma": foreground_sigma,
        "illumination_refresh": illumination_refresh,
        "seed": seed, "out_dir": out_dir,
    })


@cli.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", default=None, type=click.Path(),
              help="Where to re-run (default: '<manifest dir>/replay').")
def replay(manifest, out_dir):
    """Re-execute a manifest and verify byte-identical outputs."""
    with open(manifest, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != "gpmm-run" or doc.get("command") not in _COMMANDS:
        raise DataError(f"{manifest}: not a gpmm run manifest")
    command = doc["command"]
    params = dict(doc["config"])
    root = Path(out_dir) if out_dir else Path(manifest).parent / "replay"
    root.mkdir(parents=True, exist_ok=True)
    for key in _OUTPUT_KEYS[command]:
        if params.get(key) is None:
            continue
        if key.endswith("dir"):
            params[key] = str(root)
        else:
            params[key] = str(root / Path(params[key]).name)
    fn = _COMMANDS[command]
    started, t0 = _utc_now(), time.time()
    inputs, outputs, manifest_path = fn(params)
    new_doc = write_manifest(command, params, inputs, outputs,
                             params.get("seed", 0), started, t0,
                             manifest_path)
    old = {o["path"]: o["sha256"] for o in doc["outputs"]}
    new = {o["path"]: o["sha256"] for o in new_doc["outputs"]}
    mismatched = sorted(set(old) ^ set(new))
    mismatched += sorted(p for p in set(old) & set(new) if old[p] != new[p])
    for path in sorted(old):
        status = "ok" if new.get(path) == old[path] else "MISMATCH"
        click.echo(f"  {status}  {path}")
    if mismatched:
        raise NumericalError(
            f"replay of {command} diverged on {len(mismatched)} output(s): "
            f"{', '.join(mismatched)}")
    click.echo(f"replay of {command!r}: {len(old)} output(s) byte-identical")


def main(argv=None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    json_errors = "--json-errors" in args or bool(os.environ.get("GPMM_JSON_ERRORS"))

    def report(exc, code):
        if json_errors:
            doc = {"error": type(exc).__name__, "message": str(exc),
                   "exit_code": code}
            click.echo(json.dumps(doc, sort_keys=True), err=True)
        else:
            click.echo(f"error: {exc}", err=True)
        return code

    try:
        cli.main(args=args, standalone_mode=False, obj={})
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.Abort:
        return _USAGE
    except click.UsageError as exc:
        return report(exc, _USAGE)
    except (MeshFormatError, TopologyError, DataError) as exc:
        return report(exc, _DATA)
    except (NumericalError, FitAbortError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        return report(exc, _NUMERIC)
    except GpmmError as exc:
        return report(exc, _DATA)


if __name__ == "__main__":
    sys.exit(main())
