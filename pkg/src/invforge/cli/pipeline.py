"""Pipeline stages over a run directory, with a hash-checked append-only manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
import time
from pathlib import Path

import numpy as np

from ..data import FamilyConfig, ShapeRecord, generate_dataset, load_dataset, remesh_record, split_indices, write_dataset
from ..diffcore import load_checkpoint, make_rng, save_checkpoint
from ..diffusion import (DiffusionTrainConfig, EpsNet, EpsNetConfig, GuidanceConfig, LatentObjectiveConfig,
                         LatentObjectiveTrainConfig, latent_relative_error, load_epsnet, load_latent_objective,
                         make_schedule, sample, save_epsnet, save_latent_objective, save_samples,
                         train_diffusion, train_latent_objective, write_guidance_trace)
from ..errors import ConfigError, DataError, DegenerateLatentError
from ..fields import extract_design
from ..geometry import read_field_csv, read_obj, write_field_csv, write_obj
from ..metrics import (CEMConfig, Design, cem_search, d2_descriptor, design_record, evaluate, latent_backprop,
                       write_table_csv)
from ..pgvae import (VAEConfig, VAETrainConfig, decode_to_triplane, encode_record, field_error, load_vae,
                     occupancy_iou, save_vae, train_vae)
from ..refine import RefineConfig, refine, write_trace_csv
from ..surrogate import (FlowSpec, GNNConfig, GNNSample, GNNTrainConfig, gnn_objective, load_gnn,
                         oracle_drag, oracle_drag_gradient, relative_error, save_gnn, train_gnn)
from .config import config_hash, dump_config

log = logging.getLogger(__name__)


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _files(path: Path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.rglob("*") if p.is_file())
    return [path] if path.exists() else []


class Run:
    """A run directory: resolved config, manifest and stage artifacts."""

    def __init__(self, cfg: dict) -> None:
        self.cfg = cfg
        self.root = Path(cfg["out"])
        self.seed = int(cfg["seed"])
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            (self.root / "config.resolved").write_text(dump_config(cfg))
        except OSError as exc:
            raise DataError(f"cannot write to run directory {self.root}: {exc}") from exc
        self.manifest = self.root / "manifest.jsonl"

    # -- paths
    @property
    def data(self) -> Path:
        return self.root / "data"

    def model(self, name: str) -> Path:
        return self.root / "models" / name

    def design_dir(self, name: str | None = None) -> Path:
        return self.root / (name or self.cfg["design"]["name"])

    # -- manifest
    def hashes(self, paths) -> dict:
        out = {}
        for p in paths:
            for f in _files(p):
                out[str(f.relative_to(self.root))] = file_hash(f)
        return out

    def entries(self) -> list[dict]:
        if not self.manifest.exists():
            return []
        return [json.loads(line) for line in self.manifest.read_text().splitlines() if line.strip()]

    def _up_to_date(self, stage: str, key: str) -> bool:
        for e in reversed(self.entries()):
            if e["stage"] != stage:
                continue
            if e["config_hash"] != key:
                return False
            for rel, digest in e["outputs"].items():
                f = self.root / rel
                if not f.exists() or file_hash(f) != digest:
                    return False
            return True
        return False

    def stage(self, stage: str, params: dict, inputs: list[Path], outputs: list[Path], fn) -> bool:
        """Run ``fn`` unless an identical earlier run left intact outputs; returns True if it ran."""
        missing = [str(p) for p in inputs if not _files(p)]
        if missing:
            raise DataError(f"stage {stage!r} is missing inputs {missing}; run the earlier stages first")
        in_hashes = self.hashes(inputs)
        key = config_hash({"stage": stage, "seed": self.seed, "params": params, "inputs": in_hashes})
        if self._up_to_date(stage, key):
            log.info("%s: up to date, skipping", stage)
            return False
        for p in outputs:
            if Path(p).is_dir():
                shutil.rmtree(p)
        t0 = time.time()
        fn()
        entry = {"stage": stage, "seed": self.seed, "config_hash": key, "inputs": in_hashes,
                 "outputs": self.hashes(outputs), "wall_time": round(time.time() - t0, 3)}
        with self.manifest.open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        log.info("%s: done in %.1f s", stage, entry["wall_time"])
        return True


def _flow(cfg) -> FlowSpec:
    return FlowSpec(np.asarray(cfg["flow"]["direction"], dtype=float), float(cfg["flow"]["a_ref"]))


def _family(cfg) -> FamilyConfig:
    d = {k: v for k, v in cfg["data"].items() if k != "n_train"}
    d["axis_range"] = tuple(d["axis_range"])
    d["exponent_range"] = tuple(d["exponent_range"])
    return FamilyConfig(**d)


def _split(run: Run, records: list[ShapeRecord]):
    train, held = split_indices(len(records), int(run.cfg["data"]["n_train"]))
    return [records[i] for i in train], [records[i] for i in held]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- stages ------------------------------------------------------------------------

def gen_data(run: Run) -> None:
    cfg = run.cfg
    family = _family(cfg)
    if not 0 < cfg["data"]["n_train"] <= family.n_shapes:
        raise ConfigError("data.n_train must lie in [1, data.n_shapes]")

    def go():
        records = generate_dataset(family, run.seed, _flow(cfg))
        write_dataset(run.data, records, {"family": cfg["data"], "flow": cfg["flow"], "seed": run.seed})
    run.stage("gen-data", {"data": cfg["data"], "flow": cfg["flow"]}, [], [run.data], go)


def train_vae_stage(run: Run) -> None:
    cfg = run.cfg
    outs = [run.model("vae.ckpt"), run.model("latents.ckpt"), run.model("vae_curve.csv"), run.model("vae_eval.json")]

    def go():
        records = load_dataset(run.data)
        train, held = _split(run, records)
        vcfg = VAEConfig(**{**cfg["vae"], "channels": tuple(cfg["vae"]["channels"])})
        model, hist = train_vae(train, vcfg, VAETrainConfig(**cfg["vae_train"]), run.seed)
        run.model("").mkdir(parents=True, exist_ok=True)
        save_vae(outs[0], model)
        latents = {}
        for r in records:
            draw = None if cfg["encode"]["use_mean"] else make_rng(run.seed, "encode", "sample", r.index)
            latents[f"latent.{r.index:04d}"] = encode_record(model, r, run.seed, draw)
        latents["drag"] = np.array([r.drag for r in records])
        save_checkpoint(outs[1], latents, {"kind": "latents", "n_train": cfg["data"]["n_train"]})
        _write_rows(outs[2], ["step", "total", "bce", "mse", "kl"],
                    [[i, repr(h["total"]), repr(h["bce"]), repr(h["mse"]), repr(h["kl"])] for i, h in enumerate(hist)])
        ev = {}
        if held:
            ious = [occupancy_iou(model, r, seed=run.seed) for r in held]
            fe = [field_error(model, r, seed=run.seed) for r in held]
            ev = {"heldout_iou": ious, "heldout_iou_mean": float(np.mean(ious)),
                  "field_mse_over_var": float(sum(a for a, _ in fe) / sum(b for _, b in fe))}
        _write_json(outs[3], ev)
    run.stage("train-vae", {k: cfg[k] for k in ("vae", "vae_train", "encode")} | {"n_train": cfg["data"]["n_train"]},
              [run.data], outs, go)


def _load_latents(run: Run):
    path = run.model("latents.ckpt")
    if not path.exists():
        raise DataError(f"no encoded latents at {path}; run `invforge train vae` first")
    tensors, meta = load_checkpoint(path)
    keys = sorted(k for k in tensors if k.startswith("latent."))
    z = np.stack([tensors[k] for k in keys])
    n_train = int(meta["n_train"])
    return z, tensors["drag"], n_train


def train_diffusion_stage(run: Run) -> None:
    cfg = run.cfg
    outs = [run.model("diffusion.ckpt"), run.model("diffusion_curve.csv")]

    def go():
        z, _, n_train = _load_latents(run)
        d = cfg["diffusion"]
        ecfg = EpsNetConfig(n_tokens=z.shape[1], d_z=z.shape[2], width=d["width"], depth=d["depth"],
                            heads=d["heads"], act=d["act"])
        sched = make_schedule(d["T"], d["beta_1"], d["beta_T"])
        net = EpsNet(ecfg, make_rng(run.seed, "diffusion", "init"))
        hist = train_diffusion(z[:n_train], net, sched, DiffusionTrainConfig(**cfg["diffusion_train"]), run.seed)
        save_epsnet(outs[0], net, sched)
        _write_rows(outs[1], ["step", "loss"], [[i, repr(h)] for i, h in enumerate(hist)])
    run.stage("train-diffusion", {k: cfg[k] for k in ("diffusion", "diffusion_train")},
              [run.model("latents.ckpt")], outs, go)


def train_latent_obj_stage(run: Run) -> None:
    cfg = run.cfg
    outs = [run.model("latent_obj.ckpt"), run.model("latent_obj_eval.json")]

    def go():
        z, drag, n_train = _load_latents(run)
        vae_meta = load_checkpoint(run.model("vae.ckpt"))[1]
        lcfg = LatentObjectiveConfig(r=int(vae_meta["config"]["r"]), d_z=z.shape[2], **cfg["latent_obj"])
        net, hist = train_latent_objective(z[:n_train], drag[:n_train], lcfg,
                                           LatentObjectiveTrainConfig(**cfg["latent_obj_train"]), run.seed)
        save_latent_objective(outs[0], net)
        ev = {"train_relative_error": latent_relative_error(net, z[:n_train], drag[:n_train]),
              "final_loss": hist[-1] if hist else None}
        if n_train < len(z):
            ev["heldout_relative_error"] = latent_relative_error(net, z[n_train:], drag[n_train:])
        _write_json(outs[1], ev)
    run.stage("train-latent-obj", {k: cfg[k] for k in ("latent_obj", "latent_obj_train")},
              [run.model("latents.ckpt"), run.model("vae.ckpt")], outs, go)


def train_gnn_stage(run: Run) -> None:
    cfg = run.cfg
    outs = [run.model("gnn.ckpt"), run.model("gnn_eval.json")]

    def go():
        records = load_dataset(run.data)
        train, held = _split(run, records)
        flow, res = _flow(cfg), int(cfg["design"]["grid_res"])

        # each shape twice: its generated mesh and a marching-cubes remesh like the extracted designs
        def both(rs):
            return ([GNNSample(r.mesh, r.field, r.drag) for r in rs],
                    [GNNSample(*remesh_record(r, res, flow)) for r in rs])
        native, remeshed = both(train)
        net, hist = train_gnn(native + remeshed, GNNConfig(**cfg["gnn"]), GNNTrainConfig(**cfg["gnn_train"]),
                              run.seed)
        run.model("").mkdir(parents=True, exist_ok=True)
        save_gnn(outs[0], net)
        ev = {"train_relative_error": relative_error(net, native),
              "train_relative_error_remeshed": relative_error(net, remeshed),
              "final_loss": hist[-1] if hist else None}
        if held:
            native, remeshed = both(held)
            ev["heldout_relative_error"] = relative_error(net, native)
            ev["heldout_relative_error_remeshed"] = relative_error(net, remeshed)
        _write_json(outs[1], ev)
    params = {k: cfg[k] for k in ("gnn", "gnn_train")} | {"n_train": cfg["data"]["n_train"],
                                                           "grid_res": cfg["design"]["grid_res"]}
    run.stage("train-gnn", params, [run.data], outs, go)


def _refine_config(cfg) -> RefineConfig:
    r = {k: v for k, v in cfg["refine"].items() if k != "objective"}
    r["counts"] = tuple(r["counts"])
    return RefineConfig(**r)


def _propose(run: Run, method: str, need: int, attempt: int, models, trace):
    """Draw ``need`` latents with the configured design method."""
    cfg = run.cfg["design"]
    vae, net, sched, lobj = models
    if method == "diffusion":
        guidance = GuidanceConfig(float(cfg["gamma"]), lobj, float(cfg["clip"]))
        return sample(net, sched, guidance, make_rng(run.seed, "design", "sample", attempt), need, trace)
    z, _, n_train = _load_latents(run)
    init = z[:n_train]
    out = []
    for i in range(need):
        rng = make_rng(run.seed, "design", method, attempt, i)
        if method == "cem":
            res = cem_search(lambda b: lobj.value_and_grad(b)[0], init,
                             CEMConfig(iterations=int(cfg["cem_iterations"])), seed=int(rng.integers(2 ** 31)))
        else:
            start = init[rng.integers(len(init))]
            fn = lambda x: tuple(a[0] for a in lobj.value_and_grad(x[None]))
            res = latent_backprop(fn, start, int(cfg["gd_steps"]), float(cfg["gd_lr"]))
        out.append(res.best)
    return np.stack(out)


def design(run: Run) -> None:
    cfg = run.cfg
    dcfg = cfg["design"]
    method = dcfg["method"]
    if method not in ("diffusion", "cem", "gd"):
        raise ConfigError(f"design.method must be diffusion, cem or gd, not {method!r}")
    if dcfg["n"] < 1 or dcfg["retries"] < 0:
        raise ConfigError("design.n must be positive and design.retries non-negative")
    if cfg["refine"]["objective"] not in ("gnn", "oracle"):
        raise ConfigError("refine.objective must be gnn or oracle")
    out = run.design_dir()
    ckpts = [run.model(n) for n in ("vae.ckpt", "diffusion.ckpt", "latent_obj.ckpt", "latents.ckpt")]
    # the surrogate is only an input when candidates are refined against it
    uses_gnn = dcfg["refine"] and cfg["refine"]["objective"] == "gnn"
    if uses_gnn:
        ckpts.append(run.model("gnn.ckpt"))

    def go():
        vae = load_vae(ckpts[0])
        net, sched = load_epsnet(ckpts[1])
        lobj = load_latent_objective(ckpts[2])
        gnn = load_gnn(ckpts[4]) if uses_gnn else None
        flow = _flow(cfg)
        accepted, trace, skipped = [], [], 0
        for attempt in range(int(dcfg["retries"]) + 1):
            need = dcfg["n"] - len(accepted)
            if need == 0:
                break
            z = _propose(run, method, need, attempt, (vae, net, sched, lobj), trace if attempt == 0 else None)
            for zi in z:
                try:
                    mesh, phi = extract_design(decode_to_triplane(zi, vae), vae.heads, int(dcfg["grid_res"]))
                except DegenerateLatentError as exc:
                    skipped += 1
                    log.warning("candidate skipped (%s); drawing a replacement", exc)
                    continue
                accepted.append((zi, mesh, phi))
        if not accepted:
            raise DataError(f"all {skipped} sampled latents were degenerate")
        if len(accepted) < dcfg["n"]:
            log.warning("only %d of %d candidates after %d retries", len(accepted), dcfg["n"], dcfg["retries"])
        out.mkdir(parents=True, exist_ok=True)
        save_samples(out / "samples.ckpt", np.stack([a[0] for a in accepted]))
        if trace:
            write_guidance_trace(out / "guidance_trace.csv", trace)
        rcfg = _refine_config(cfg)
        summary = []
        for i, (_, mesh, phi) in enumerate(accepted):
            cdir = out / "candidates" / f"{i:04d}"
            cdir.mkdir(parents=True, exist_ok=True)
            write_obj(cdir / "initial.obj", mesh)
            write_field_csv(cdir / "field.csv", phi)
            item = {"index": i, "n_vertices": mesh.n_vertices, "refined": bool(dcfg["refine"]),
                    "rejected": False, "reason": ""}
            if dcfg["refine"]:
                if cfg["refine"]["objective"] == "oracle":
                    obj = lambda v, m=mesh: (oracle_drag(m.with_vertices(v), flow),
                                             oracle_drag_gradient(m.with_vertices(v), flow))
                else:
                    obj = gnn_objective(mesh, phi, gnn)
                res = refine(mesh, obj, rcfg)
                write_obj(cdir / "refined.obj", res.mesh)
                write_trace_csv(cdir / "trace.csv", res.trace)
                item.update(rejected=res.rejected, reason=res.reason)
            else:
                shutil.copyfile(cdir / "initial.obj", cdir / "refined.obj")
            summary.append(item)
        _write_json(out / "summary.json", {"method": method, "candidates": summary, "skipped": skipped,
                                           "gamma": dcfg["gamma"] if method == "diffusion" else None})
    params = {k: cfg[k] for k in ("design", "flow")} | {"refine": cfg["refine"] if dcfg["refine"] else None}
    run.stage(f"design:{dcfg['name']}", params, ckpts, [out], go)


def load_design(path: Path, which: str = "refined") -> list[Design]:
    cdirs = sorted((Path(path) / "candidates").glob("[0-9]*"))
    if not cdirs:
        raise DataError(f"no candidates under {path}; run `invforge design` first")
    out = []
    for c in cdirs:
        mesh = read_obj(c / f"{which}.obj")
        out.append(Design(mesh, read_field_csv(c / "field.csv", mesh.n_vertices)))
    return out


def report(run: Run, names: list[str] | None = None) -> None:
    cfg = run.cfg
    names = names or [cfg["design"]["name"]]
    dirs = [run.design_dir(n) for n in names]
    out = run.root / "report"
    outs = [out] + [d / "eval" for d in dirs]

    def go():
        flow = _flow(cfg)
        records = load_dataset(run.data)
        train, _ = _split(run, records)
        gnn = load_gnn(run.model("gnn.ckpt"))
        train_desc = np.stack([d2_descriptor(r.mesh) for r in train])
        rcfg = cfg["report"]
        reports, scatter, traces = [], [], []
        for name, ddir in zip(names, dirs):
            summary = json.loads((ddir / "summary.json").read_text())
            refined = load_design(ddir, "refined")
            for i, d in enumerate(refined):
                _write_json(ddir / "eval" / f"{i:04d}.json", design_record(d.mesh, d.phi, gnn, flow))
            variants = [(name, refined)]
            if summary["candidates"][0]["refined"]:
                variants.append((f"{name}-norefine", load_design(ddir, "initial")))
                for c in sorted((ddir / "candidates").glob("[0-9]*")):
                    with (c / "trace.csv").open() as fh:
                        for row in csv.DictReader(fh):
                            traces.append([name, c.name] + list(row.values()))
            for method, designs in variants:
                rep = evaluate(designs, [r.mesh for r in train], gnn, flow, rcfg["tau"], method,
                               int(rcfg["bootstrap_seed"]), int(rcfg["k"]), train_desc)
                reports.append(rep)
                scatter += [[method, d["index"], d["cd_pred"], d["cd_oracle"]] for d in rep.designs]
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "report.json", [{"method": r.method, "designs": r.designs, "aggregate": r.aggregate}
                                          for r in reports])
        write_table_csv(out / "table.csv", reports)
        _write_rows(out / "scatter.csv", ["method", "index", "cd_pred", "cd_oracle"], scatter)
        _write_rows(out / "refine_traces.csv", ["design", "candidate", "step", "loss", "objective", "smooth",
                                                "volume", "eta"], traces)
    # the eval/ folders written here live inside the design directories, so only hash what design wrote
    inputs = [run.data, run.model("gnn.ckpt")]
    for d in dirs:
        inputs += [d / "summary.json", d / "samples.ckpt", d / "candidates"]
    run.stage("report", {"report": cfg["report"], "flow": cfg["flow"], "designs": names}, inputs, outs, go)


def export(run: Run, dest: Path, name: str | None = None) -> None:
    """Copy refined meshes and fields into a flat directory with an oracle drag table."""
    src = run.design_dir(name)
    designs = load_design(src, "refined")
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    flow = _flow(run.cfg)
    rows = []
    for i, d in enumerate(designs):
        write_obj(dest / f"{i:04d}.obj", d.mesh)
        write_field_csv(dest / f"{i:04d}.csv", d.phi)
        rows.append([i, repr(oracle_drag(d.mesh, flow))])
    _write_rows(dest / "drag.csv", ["index", "cd_oracle"], rows)


TRAINERS = {"vae": train_vae_stage, "diffusion": train_diffusion_stage, "latent-obj": train_latent_obj_stage,
            "gnn": train_gnn_stage}
