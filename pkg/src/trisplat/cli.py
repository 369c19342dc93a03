"""Command-line entry point: scenes in, experiments run, artifacts out.

Commands map one-to-one onto library operations:

    render      depth/normal maps of a Gaussian scene, both render modes
    triangulate consensus points of Gaussian centers from all cameras
    optimize    consensus-guided descent on a synthetic noisy scene
    ablate-k    one optimize run per neighbor count k
    ablate-loss robust vs plain L2 arm on the same scene
    gradcheck   finite-difference validation of the loss gradient
    fuse        depth maps -> TSDF -> mesh
    eval        point set vs ground truth metrics
    rerun       re-execute a command from its manifest

Every run writes deterministically named artifacts ({command}_{seed}.{ext})
plus a RunManifest JSON, refuses to overwrite without --force, and exits 0 on
success, 2 on input errors, 3 when optimization diverges (ablate-loss reports
a diverging arm as data and still exits 0).  Wall-clock figures live only in
manifests and the ablation tables' iterations_per_second column; every other
CSV value is byte-identical across reruns of the same manifest.
TRIAGS_THREADS caps worker threads in batch triangulation.

Config files are strict JSON objects; unknown keys are rejected by name.
"""

from __future__ import annotations

import json
import math
import os
import sys
import time
from contextlib import contextmanager

import click
import numpy as np

from . import __version__
from .camera import BehindCamera, InsufficientViews, project_point
from .loss import EmptyBatch, finite_diff_check, tggc_loss_and_grad, write_gradcheck_csv
from .optimize import (
    ExperimentConfig,
    OptimizationDiverged,
    ablate_k,
    ablate_loss,
    eval_metrics,
    f1_threshold,
    optimize,
    save_point_cloud_ply,
    write_ablation_csv,
    write_loss_ablation_csv,
    write_trace_csv,
)
from .raster import RENDER_MODES, render_depth_normal, save_map_binary, save_pgm
from .sceneio import SceneFile, SceneFormatError, load_scene
from .scenes import SCENE_KINDS, analytic_depth_map, make_synthetic_scene
from .triangulate import triangulate
from .tsdf import (
    boundary_edge_count,
    extract_mesh,
    fuse_tsdf,
    make_volume_for_bbox,
    mesh_chamfer,
    save_mesh_obj,
    save_mesh_ply,
    save_volume,
)

EXIT_INPUT_ERROR = 2
EXIT_DIVERGED = 3

LOSS_FLAG_MAP = {"gm": "geman_mcclure", "l2": "l2"}

_SCENE_CONFIG_KEYS = (
    "kind",
    "n_views",
    "noise",
    "grid",
    "image_size",
    "margin",
    "outlier_fraction",
    "outlier_scale",
    "view_bias",
    "layout",
)
_EXPERIMENT_CONFIG_KEYS = (
    "k",
    "loss",
    "steps",
    "step_size",
    "step_scale",
    "warmup_fraction",
    "loss_weight",
    "sigma0",
    "sigma_end",
    "momentum",
    "differentiate_consensus",
    "max_neighbor_angle_deg",
    "pin_iterations",
    "pin_tolerance",
)

_ALLOWED_CONFIG_KEYS = {
    "render": (),
    "triangulate": (),
    "optimize": _SCENE_CONFIG_KEYS + _EXPERIMENT_CONFIG_KEYS,
    "ablate-k": _SCENE_CONFIG_KEYS + _EXPERIMENT_CONFIG_KEYS + ("k_values",),
    "ablate-loss": _SCENE_CONFIG_KEYS + _EXPERIMENT_CONFIG_KEYS,
    "gradcheck": ("points", "step", "pixel_noise", "tolerance", "sigma"),
    "fuse": (),
    "eval": ("points_path", "tau"),
}

_SCENE_DEFAULTS = {"kind": "sphere", "n_views": 20, "noise": 0.05, "grid": 12}


class InputError(Exception):
    """Bad user input: scene, config, or filesystem state.  Exit code 2."""


class Workspace:
    """Owns one run's output directory, overwrite policy, and timings."""

    def __init__(self, out_dir: str, force: bool):
        self.out_dir = out_dir
        self.force = force
        self.outputs: list[str] = []
        self.timings: dict[str, float] = {}
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as exc:
            raise InputError(f"cannot create output directory {out_dir}: {exc}") from exc

    def path(self, name: str) -> str:
        target = os.path.join(self.out_dir, name)
        if os.path.exists(target) and not self.force:
            raise InputError(f"refusing to overwrite {target}; pass --force")
        self.outputs.append(name)
        return target

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        yield
        self.timings[name] = self.timings.get(name, 0.0) + (time.perf_counter() - t0)

    def write_manifest(self, command: str, seed: int, config: dict, wall_seconds: float) -> str:
        manifest = {
            "command": command,
            "seed": seed,
            "config": config,
            "tool_version": __version__,
            "outputs": list(self.outputs),
            "wall_clock_seconds": wall_seconds,
            "timings": dict(self.timings),
        }
        target = self.path(f"{command}_{seed}_manifest.json")
        tmp = target + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, target)
        return target


def _read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InputError(f"config file {path} must hold a JSON object")
    return cfg


def _check_config_keys(cfg: dict, command: str) -> None:
    allowed = _ALLOWED_CONFIG_KEYS[command]
    for key in cfg:
        if key not in allowed:
            raise InputError(f"config: unknown key {key!r} for command {command}")


def _scene_kwargs(cfg: dict) -> dict:
    out = dict(_SCENE_DEFAULTS)
    for key in _SCENE_CONFIG_KEYS:
        if key in cfg:
            out[key] = cfg[key]
    if out["kind"] not in SCENE_KINDS:
        raise InputError(f"config: kind must be one of {SCENE_KINDS}, got {out['kind']!r}")
    return out


def _experiment_config(cfg: dict, seed: int, k=None, loss=None, steps=None) -> ExperimentConfig:
    kwargs = {key: cfg[key] for key in _EXPERIMENT_CONFIG_KEYS if key in cfg}
    kwargs.setdefault("k", 8)
    if k is not None:
        kwargs["k"] = k
    if loss is not None:
        kwargs["loss"] = LOSS_FLAG_MAP[loss]
    elif "loss" in kwargs and kwargs["loss"] in LOSS_FLAG_MAP:
        kwargs["loss"] = LOSS_FLAG_MAP[kwargs["loss"]]
    if steps is not None:
        kwargs["steps"] = steps
    try:
        return ExperimentConfig(seed=seed, **kwargs)
    except (TypeError, ValueError) as exc:
        raise InputError(f"config: {exc}") from exc


def _load_scene_file(path: str | None) -> SceneFile:
    if path is None:
        raise InputError("this command requires --scene PATH")
    return load_scene(path)


def _resolved(seed: int, scene: str | None = None, config: dict | None = None, **extra) -> dict:
    out = {"seed": seed}
    if scene is not None:
        out["scene"] = os.path.abspath(scene)
    out.update(config or {})
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# Command bodies (shared by the CLI and rerun)
# ---------------------------------------------------------------------------


def _run_render(resolved: dict, ws: Workspace) -> None:
    seed = resolved["seed"]
    scene = _load_scene_file(resolved.get("scene"))
    if not scene.gaussians:
        raise InputError("render: the scene has no gaussians")
    import csv as _csv

    rows = []
    with ws.stage("render"):
        for cam in scene.cameras:
            for mode in RENDER_MODES:
                dmap = render_depth_normal(cam, scene.gaussians, mode=mode)
                stem = f"render_{seed}_view{cam.view_id}_{mode}"
                save_map_binary(ws.path(stem + "_depth.bin"), dmap.depth)
                save_map_binary(ws.path(stem + "_normal.bin"), dmap.normal)
                save_pgm(ws.path(stem + "_depth.pgm"), dmap.depth)
                n_valid = int(np.sum(dmap.valid))
                mean_depth = (
                    float(np.mean(dmap.depth[dmap.valid])) if n_valid else math.nan
                )
                rows.append((cam.view_id, mode, n_valid, mean_depth))
    with open(ws.path(f"render_{seed}.csv"), "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["view_id", "mode", "valid_pixels", "mean_valid_depth"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(r[3])])


def _run_triangulate(resolved: dict, ws: Workspace) -> None:
    seed = resolved["seed"]
    scene = _load_scene_file(resolved.get("scene"))
    if len(scene.cameras) < 2:
        raise InputError("triangulate: need at least 2 cameras")
    if not scene.gaussians:
        raise InputError("triangulate: the scene has no gaussians")
    import csv as _csv

    with ws.stage("triangulate"):
        out_rows = []
        for i, g in enumerate(scene.gaussians):
            views, pixels = [], []
            for cam in scene.cameras:
                try:
                    obs = project_point(cam, g.center)
                except BehindCamera:
                    continue
                views.append(cam)
                pixels.append((obs.u, obs.v))
            if len(views) < 2:
                out_rows.append(
                    [i] + [repr(float(c)) for c in g.center]
                    + [repr(math.nan)] * 4 + [repr(math.nan), repr(math.nan), 0, 1]
                )
                continue
            res = triangulate(views, pixels)
            err = float(np.linalg.norm(res.point - g.center))
            out_rows.append(
                [i]
                + [repr(float(c)) for c in g.center]
                + [repr(float(c)) for c in res.point]
                + [repr(err), repr(res.sigma_min), repr(res.spectral_gap), len(views),
                   int(res.degenerate)]
            )
    with open(ws.path(f"triangulate_{seed}.csv"), "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(
            ["index", "true_x", "true_y", "true_z", "est_x", "est_y", "est_z",
             "error", "sigma_min", "spectral_gap", "n_views", "degenerate"]
        )
        for row in out_rows:
            w.writerow(row)


def _run_optimize(resolved: dict, ws: Workspace) -> None:
    seed = resolved["seed"]
    cfg = {k: v for k, v in resolved.items() if k not in ("seed", "scene")}
    _check_config_keys(cfg, "optimize")
    scene_kwargs = _scene_kwargs(cfg)
    config = _experiment_config(cfg, seed)
    with ws.stage("scene"):
        scene = make_synthetic_scene(seed=seed, **scene_kwargs)
    with ws.stage("optimize"):
        result = optimize(scene.surface, scene.views, config)
    with ws.stage("metrics"):
        tau = f1_threshold(scene.ground_truth.bbox_diagonal)
        metrics = eval_metrics(result.surface, scene.ground_truth, tau)
    write_trace_csv(ws.path(f"optimize_{seed}.csv"), result.trace)
    save_point_cloud_ply(ws.path(f"optimize_{seed}.ply"), result.surface.flat_points())
    ws.timings["iterations_per_second"] = result.iterations_per_second
    click.echo(
        f"optimize: rmse {result.initial_rmse:.6g} -> {result.final_rmse:.6g}, "
        f"chamfer {metrics.chamfer:.6g}, f1@{tau:.4g} {metrics.f1:.4f}"
    )


def _run_ablate_k(resolved: dict, ws: Workspace) -> None:
    seed = resolved["seed"]
    cfg = {k: v for k, v in resolved.items() if k not in ("seed", "scene")}
    _check_config_keys(cfg, "ablate-k")
    k_values = cfg.pop("k_values", [1, 4, 8, 12])
    if not isinstance(k_values, list) or not all(
        isinstance(k, int) and not isinstance(k, bool) and k >= 1 for k in k_values
    ):
        raise InputError(f"config: k_values must be a list of positive integers, got {k_values!r}")
    scene_kwargs = _scene_kwargs(cfg)
    if "n_views" not in cfg:
        scene_kwargs["n_views"] = 36  # wide ring so k=12 still has in-cone neighbors
    base = _experiment_config(cfg, seed)
    with ws.stage("ablate"):
        rows = ablate_k(scene_kwargs, k_values, seed, base)
    write_ablation_csv(ws.path(f"ablate-k_{seed}.csv"), rows)
    for r in rows:
        click.echo(
            f"k={r.k}: rmse {r.rmse:.6g} chamfer {r.chamfer:.6g} f1 {r.f1:.4f} "
            f"it/s {r.iterations_per_second:.3g} [{r.status}]"
        )


def _run_ablate_loss(resolved: dict, ws: Workspace) -> None:
    seed = resolved["seed"]
    cfg = {k: v for k, v in resolved.items() if k not in ("seed", "scene")}
    _check_config_keys(cfg, "ablate-loss")
    cfg.setdefault("outlier_fraction", 0.1)
    cfg.setdefault("outlier_scale", 0.3)
    scene_kwargs = _scene_kwargs(cfg)
    base = _experiment_config(cfg, seed)
    with ws.stage("ablate"):
        rows = ablate_loss(scene_kwargs, seed, base)
    write_loss_ablation_csv(ws.path(f"ablate-loss_{seed}.csv"), rows)
    for r in rows:
        click.echo(f"{r.loss}: rmse {r.rmse:.6g} f1 {r.f1:.4f} [{r.status}]")


def _run_gradcheck(resolved: dict, ws: Workspace) -> None:
    seed = resolved["seed"]
    cfg = {k: v for k, v in resolved.items() if k not in ("seed", "scene")}
    _check_config_keys(cfg, "gradcheck")
    n_points = int(cfg.get("points", 24))
    if n_points < 1:
        raise InputError(f"config: points must be positive, got {n_points}")
    step = float(cfg.get("step", 1e-5))
    pixel_noise = float(cfg.get("pixel_noise", 0.5))
    tolerance = float(cfg.get("tolerance", 1e-5))
    rng = np.random.default_rng(seed)

    scene_path = resolved.get("scene")
    if scene_path is not None:
        scene = load_scene(scene_path)
        cameras = scene.cameras
        if scene.gaussians:
            base = np.array([g.center for g in scene.gaussians])
            reps = int(np.ceil(n_points / base.shape[0]))
            base = np.tile(base, (reps, 1))[:n_points]
            base = base + 0.01 * rng.standard_normal(base.shape)
        elif scene.ground_truth is not None:
            base = scene.ground_truth.sample_points(n_points, rng)
        elif scene.ground_truth_points is not None:
            idx = rng.integers(0, scene.ground_truth_points.shape[0], size=n_points)
            base = scene.ground_truth_points[idx]
        else:
            raise InputError("gradcheck: scene has neither gaussians nor ground truth")
    else:
        synth = make_synthetic_scene("sphere", n_views=10, noise=0.0, seed=seed, grid=4)
        cameras = synth.views
        base = synth.ground_truth.sample_points(n_points, rng)
    if len(cameras) < 2:
        raise InputError("gradcheck: need at least 2 cameras")

    diag = float(np.linalg.norm(base.max(axis=0) - base.min(axis=0))) or 1.0
    sigma = float(cfg.get("sigma", 0.05 * diag))
    points0 = base + 0.02 * diag * rng.standard_normal(base.shape)
    observations = []
    for b in range(n_points):
        obs: dict[int, tuple[float, float]] = {}
        for cam in cameras:
            try:
                o = project_point(cam, base[b])
            except BehindCamera:
                continue
            du, dv = pixel_noise * rng.standard_normal(2)
            obs[cam.view_id] = (o.u + du, o.v + dv)
        if len(obs) < 2:
            raise InputError(f"gradcheck: point {b} is visible in fewer than 2 cameras")
        observations.append(obs)

    from .triangulate import SurfacePoint

    def loss_fn(X):
        pts = [
            SurfacePoint(position=X[b], reference_id=-1, pixel=(0.0, 0.0), depth=1.0)
            for b in range(X.shape[0])
        ]
        out = tggc_loss_and_grad(pts, cameras, sigma, observations=observations)
        return out.loss, out.gradients

    with ws.stage("gradcheck"):
        report = finite_diff_check(loss_fn, points0, step)
    write_gradcheck_csv(ws.path(f"gradcheck_{seed}.csv"), report)
    click.echo(f"gradcheck: max relative error {report.max_rel_error:.3e} over {n_points} points")
    if not report.max_rel_error < tolerance:
        click.echo(f"gradcheck: FAILED tolerance {tolerance:g}", err=True)
        sys.exit(1)


def _run_fuse(resolved: dict, ws: Workspace) -> None:
    seed = resolved["seed"]
    resolution = int(resolved.get("resolution", 128))
    scene = _load_scene_file(resolved.get("scene"))
    import csv as _csv

    if scene.gaussians:
        with ws.stage("render"):
            maps = [
                render_depth_normal(cam, scene.gaussians, mode="intersection")
                for cam in scene.cameras
            ]
        centers = np.array([g.center for g in scene.gaussians])
        radius = 3.0 * max(float(np.max(g.scales)) for g in scene.gaussians)
        lo = centers.min(axis=0) - radius
        hi = centers.max(axis=0) + radius
    elif scene.ground_truth is not None:
        with ws.stage("render"):
            maps = [analytic_depth_map(cam, scene.ground_truth) for cam in scene.cameras]
        lo, hi = scene.ground_truth.bounds()
    else:
        raise InputError("fuse: scene needs gaussians or an analytic ground truth")
    if scene.ground_truth is not None:
        lo, hi = scene.ground_truth.bounds()

    with ws.stage("fuse"):
        volume = make_volume_for_bbox(lo, hi, resolution)
        for cam, dmap in zip(scene.cameras, maps):
            fuse_tsdf(volume, cam, dmap)
    with ws.stage("extract"):
        mesh = extract_mesh(volume)
    save_mesh_ply(ws.path(f"fuse_{seed}.ply"), mesh)
    save_mesh_obj(ws.path(f"fuse_{seed}.obj"), mesh)
    vol_path = ws.path(f"fuse_{seed}_volume.bin")
    save_volume(vol_path, volume)
    ws.outputs.append(f"fuse_{seed}_volume.bin.json")

    chamfer = math.nan
    if mesh.n_triangles > 0:
        reference = None
        if scene.ground_truth is not None:
            reference = scene.ground_truth.sample_points(20000, np.random.default_rng(seed))
        elif scene.ground_truth_points is not None:
            reference = scene.ground_truth_points
        if reference is not None:
            with ws.stage("metrics"):
                chamfer = mesh_chamfer(mesh, reference, samples=20000, seed=seed)
    with open(ws.path(f"fuse_{seed}.csv"), "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["vertices", "triangles", "boundary_edges", "voxel_size", "chamfer"])
        w.writerow(
            [mesh.n_vertices, mesh.n_triangles, boundary_edge_count(mesh),
             repr(volume.voxel_size), repr(chamfer)]
        )
    click.echo(
        f"fuse: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles, "
        f"chamfer {chamfer:.6g} (voxel {volume.voxel_size:.6g})"
    )


def _run_eval(resolved: dict, ws: Workspace) -> None:
    seed = resolved["seed"]
    cfg = {k: v for k, v in resolved.items() if k not in ("seed", "scene")}
    _check_config_keys(cfg, "eval")
    scene = _load_scene_file(resolved.get("scene"))
    if not scene.has_ground_truth:
        raise InputError("eval: scene has no ground truth")
    if "points_path" in cfg:
        path = cfg["points_path"]
        try:
            delimiter = "," if str(path).endswith(".csv") else None
            points = np.loadtxt(path, delimiter=delimiter, ndmin=2)
        except (OSError, ValueError) as exc:
            raise InputError(f"eval: cannot load points from {path}: {exc}") from exc
    elif scene.gaussians:
        points = np.array([g.center for g in scene.gaussians])
    else:
        raise InputError("eval: provide config points_path or a scene with gaussians")
    reference = scene.ground_truth if scene.ground_truth is not None else scene.ground_truth_points
    if scene.ground_truth is not None:
        diag = scene.ground_truth.bbox_diagonal
    else:
        ref = scene.ground_truth_points
        diag = float(np.linalg.norm(ref.max(axis=0) - ref.min(axis=0)))
    tau = float(cfg.get("tau", f1_threshold(diag)))
    with ws.stage("eval"):
        try:
            metrics = eval_metrics(points, reference, tau, seed=seed)
        except ValueError as exc:
            raise InputError(f"eval: {exc}") from exc
    import csv as _csv

    with open(ws.path(f"eval_{seed}.csv"), "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["n_points", "tau", "rmse", "chamfer", "f1"])
        w.writerow([points.shape[0], repr(tau), repr(metrics.rmse), repr(metrics.chamfer),
                    repr(metrics.f1)])
    click.echo(f"eval: rmse {metrics.rmse:.6g} chamfer {metrics.chamfer:.6g} f1 {metrics.f1:.4f}")


_RUNNERS = {
    "render": _run_render,
    "triangulate": _run_triangulate,
    "optimize": _run_optimize,
    "ablate-k": _run_ablate_k,
    "ablate-loss": _run_ablate_loss,
    "gradcheck": _run_gradcheck,
    "fuse": _run_fuse,
    "eval": _run_eval,
}


def _execute(command: str, resolved: dict, out: str, force: bool) -> None:
    ws = Workspace(out, force)
    t0 = time.perf_counter()
    _RUNNERS[command](resolved, ws)
    ws.write_manifest(command, resolved["seed"], resolved, time.perf_counter() - t0)


def _guarded(fn):
    try:
        fn()
    except OptimizationDiverged as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_DIVERGED)
    except (InputError, SceneFormatError, InsufficientViews, EmptyBatch, ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INPUT_ERROR)


# ---------------------------------------------------------------------------
# Click wiring
# ---------------------------------------------------------------------------

_opt_out = click.option("--out", default="trisplat-out", show_default=True,
                        help="Output directory.")
_opt_seed = click.option("--seed", default=0, show_default=True, type=int,
                         help="Global random seed.")
_opt_force = click.option("--force", is_flag=True, help="Overwrite existing outputs.")
_opt_scene = click.option("--scene", type=click.Path(), default=None, help="Scene JSON file.")
_opt_config = click.option("--config", "config_path", type=click.Path(), default=None,
                           help="JSON config file for this command.")


@click.group()
@click.version_option(version=__version__, prog_name="trisplat")
def cli():
    """Triangulation-guided consistency experiments for Gaussian-splat geometry."""


@cli.command("render")
@_opt_scene
@_opt_out
@_opt_seed
@_opt_force
def cmd_render(scene, out, seed, force):
    """Render depth/normal maps for every camera, both render modes."""
    _guarded(lambda: _execute("render", _resolved(seed, scene), out, force))


@cli.command("triangulate")
@_opt_scene
@_opt_out
@_opt_seed
@_opt_force
def cmd_triangulate(scene, out, seed, force):
    """Triangulate Gaussian centers from all cameras."""
    _guarded(lambda: _execute("triangulate", _resolved(seed, scene), out, force))


@cli.command("optimize")
@_opt_config
@_opt_out
@_opt_seed
@_opt_force
@click.option("--k", type=int, default=None, help="Neighbor views per reference view.")
@click.option("--loss", type=click.Choice(sorted(LOSS_FLAG_MAP)), default=None,
              help="Loss kind.")
@click.option("--steps", type=int, default=None, help="Optimization steps.")
def cmd_optimize(config_path, out, seed, force, k, loss, steps):
    """Optimize a synthetic noisy scene with the consensus loss."""

    def body():
        cfg = _read_config_file(config_path)
        _check_config_keys(cfg, "optimize")
        resolved = _resolved(seed, None, cfg)
        config = _experiment_config(cfg, seed, k=k, loss=loss, steps=steps)
        resolved.update(
            {key: getattr(config, key) for key in _EXPERIMENT_CONFIG_KEYS}
        )
        _execute("optimize", resolved, out, force)

    _guarded(body)


@cli.command("ablate-k")
@_opt_config
@_opt_out
@_opt_seed
@_opt_force
@click.option("--loss", type=click.Choice(sorted(LOSS_FLAG_MAP)), default=None)
@click.option("--steps", type=int, default=None)
def cmd_ablate_k(config_path, out, seed, force, loss, steps):
    """Run the neighbor-count ablation (one optimize run per k)."""

    def body():
        cfg = _read_config_file(config_path)
        _check_config_keys(cfg, "ablate-k")
        if loss is not None:
            cfg["loss"] = LOSS_FLAG_MAP[loss]
        if steps is not None:
            cfg["steps"] = steps
        cfg.setdefault("steps", 600)
        _execute("ablate-k", _resolved(seed, None, cfg), out, force)

    _guarded(body)


@cli.command("ablate-loss")
@_opt_config
@_opt_out
@_opt_seed
@_opt_force
@click.option("--k", type=int, default=None)
@click.option("--steps", type=int, default=None)
def cmd_ablate_loss(config_path, out, seed, force, k, steps):
    """Compare the robust arm against plain L2 on an outlier-ridden scene."""

    def body():
        cfg = _read_config_file(config_path)
        _check_config_keys(cfg, "ablate-loss")
        if k is not None:
            cfg["k"] = k
        if steps is not None:
            cfg["steps"] = steps
        cfg.setdefault("steps", 800)
        cfg.setdefault("n_views", 12)
        cfg.setdefault("k", 6)
        _execute("ablate-loss", _resolved(seed, None, cfg), out, force)

    _guarded(body)


@cli.command("gradcheck")
@_opt_scene
@_opt_config
@_opt_out
@_opt_seed
@_opt_force
def cmd_gradcheck(scene, config_path, out, seed, force):
    """Check the loss gradient against central finite differences."""

    def body():
        cfg = _read_config_file(config_path)
        _check_config_keys(cfg, "gradcheck")
        _execute("gradcheck", _resolved(seed, scene, cfg), out, force)

    _guarded(body)


@cli.command("fuse")
@_opt_scene
@_opt_out
@_opt_seed
@_opt_force
@click.option("--resolution", type=int, default=128, show_default=True,
              help="Voxels along the longest bounding-box axis.")
def cmd_fuse(scene, out, seed, force, resolution):
    """Fuse depth maps into a TSDF and extract a mesh."""
    _guarded(
        lambda: _execute("fuse", _resolved(seed, scene, None, resolution=resolution), out, force)
    )


@cli.command("eval")
@_opt_scene
@_opt_config
@_opt_out
@_opt_seed
@_opt_force
def cmd_eval(scene, config_path, out, seed, force):
    """Evaluate a point set against the scene's ground truth."""

    def body():
        cfg = _read_config_file(config_path)
        _check_config_keys(cfg, "eval")
        _execute("eval", _resolved(seed, scene, cfg), out, force)

    _guarded(body)


@cli.command("rerun")
@click.argument("manifest", type=click.Path())
@_opt_out
@_opt_force
def cmd_rerun(manifest, out, force):
    """Re-execute a command from its RunManifest."""

    def body():
        try:
            with open(manifest) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read manifest {manifest}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"manifest {manifest} is not valid JSON: {exc}") from exc
        for key in ("command", "seed", "config"):
            if key not in data:
                raise InputError(f"manifest {manifest} is missing {key!r}")
        command = data["command"]
        if command not in _RUNNERS:
            raise InputError(f"manifest names unknown command {command!r}")
        _execute(command, data["config"], out, force)

    _guarded(body)


def main():
    cli()


if __name__ == "__main__":
    main()
