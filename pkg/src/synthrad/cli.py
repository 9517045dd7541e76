"""Command-line entry point: ``synthrad <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or validation
error, 3 numeric failure.  ``--seed`` falls back to ``$SYNTHRAD_SEED`` and
then 0.  ``--config FILE`` supplies option values as JSON (keys are option
names with dashes or underscores); options given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from synthrad import data as dp
from synthrad.checkpoint import Checkpoint, CheckpointError, config_text, pack_adam, pack_module, unpack_adam
from synthrad.diffusion import (
    ConfigError,
    DenoiserConfig,
    DenoiserNet,
    UnknownTokenError,
    build_schedule,
    sample_prompts,
    token_ids,
    train_diffusion,
)
from synthrad.evaluation import (
    ClassifierConfig,
    ClassifierNet,
    ClassifierTrainer,
    ExperimentConfig,
    class_balance_report,
    run_augmentation_experiment,
)
from synthrad.optim import AdamState
from synthrad.pggan import GanConfig, GanTrainer, GrowthSchedule, classifier_scorer, derive_class_latents
from synthrad.rng import Rng

log = logging.getLogger("synthrad")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    """Everything that determines a training run; its canonical text hashes to the run id."""

    kind: str
    seed: int
    data: dict
    model: dict
    training: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def text(self) -> str:
        return config_text(self.to_dict())

    def run_id(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# option handling

DEFAULTS = {
    "seed": None,
    "resolution": 28,
    "samples_per_class": 64,
    "classes": "no finding,edema,cardiomegaly,nodule",
    "no_positions": False,
    "noise": 0.05,
    "split_ratio": 0.8,
    "format": "pgm",
    "steps": None,
    "ckpt_every": 0,
    "batch_size": 16,
    "lr": None,
    "timesteps": 1000,
    "beta_start": 1e-4,
    "beta_end": 0.02,
    "channels": "16,32",
    "final_resolution": None,
    "fade_steps": 300,
    "stable_steps": 400,
    "latent_dim": 64,
    "gan_channels": "32,32,16,16",
    "epochs": 10,
    "count": 4,
    "prompt": "",
    "n_probe": 200,
    "rows": "1000:0,500:500",
    "test_size": 300,
    "disease": "edema",
}


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config file {args.config}: {e}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = sorted(set(file_cfg) - set(vars(args)))
        if unknown:
            raise UsageError(f"config file {args.config} sets unknown options: {', '.join(unknown)}")
    args.classes_given = getattr(args, "classes", None) is not None or "classes" in file_cfg
    for key, val in list(vars(args).items()):
        if val is None or (val is False and key in file_cfg):
            if key in file_cfg:
                setattr(args, key, file_cfg[key])
            elif key in DEFAULTS and DEFAULTS[key] is not None:
                setattr(args, key, DEFAULTS[key])
    if args.seed is None:
        env = os.environ.get("SYNTHRAD_SEED")
        try:
            args.seed = int(env) if env else 0
        except ValueError:
            raise UsageError(f"SYNTHRAD_SEED must be an integer, got {env!r}") from None
    return args


def _ints(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}") from None


def parse_prompt(text: str) -> list[str]:
    """``"edema, top left"`` -> ``["edema", "top left"]``; tokens are validated."""
    tokens = [t.strip().lower() for t in text.split(",") if t.strip()]
    token_ids(tokens)
    return tokens


def parse_rows(text: str) -> tuple[tuple[int, int], ...]:
    rows = []
    for part in str(text).split(","):
        real, sep, synth = part.partition(":")
        if not sep:
            raise UsageError(f"row spec {part!r} must look like REAL:SYNTH")
        try:
            rows.append((int(real), int(synth)))
        except ValueError:
            raise UsageError(f"row spec {part!r} must hold integers") from None
    return tuple(rows)


def _toy_spec(args) -> dp.ToyDatasetSpec:
    classes = tuple(c.strip().lower() for c in str(args.classes).split(",") if c.strip())
    return dp.ToyDatasetSpec(
        resolution=int(args.resolution),
        classes=classes,
        samples_per_class=int(args.samples_per_class),
        positions=not args.no_positions,
        noise=float(args.noise),
        seed=int(args.seed),
    )


# ---------------------------------------------------------------------------
# datasets


def _load_dataset(data_desc: dict) -> tuple[dp.Partition, dp.Partition]:
    """Rebuild (train, test) from a data descriptor stored in run configs."""
    if data_desc["source"] == "toy":
        spec = dp.ToyDatasetSpec(**{**data_desc["spec"], "classes": tuple(data_desc["spec"]["classes"])})
        examples, _ = dp.generate_toy_dataset(spec)
        return dp.split_train_test(examples, data_desc["split_ratio"], data_desc["split_seed"])
    directory = Path(data_desc["path"])
    examples = dp.load_prepared(directory)
    manifest = directory / "test_ids.txt"
    if manifest.exists():
        return dp.split_train_test(examples, test_ids=dp.read_manifest(manifest))
    return dp.split_train_test(examples, data_desc["split_ratio"], data_desc["split_seed"])


def _data_desc(args) -> dict:
    if args.data:
        if not Path(args.data).is_dir():
            raise UsageError(f"--data {args.data} is not a directory")
        return {"source": "dir", "path": str(args.data), "split_ratio": float(args.split_ratio), "split_seed": int(args.seed)}
    spec = _toy_spec(args)
    return {"source": "toy", "spec": {**asdict(spec), "classes": list(spec.classes)},
            "split_ratio": float(args.split_ratio), "split_seed": int(args.seed)}


def _write_image(path: Path, img: np.ndarray, fmt: str) -> None:
    px = dp.to_uint8(img)
    if fmt == "png":
        dp.write_png(path, px)
    else:
        dp.write_pgm(path, px)


def cmd_prepare_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fmt = args.format
    boxes: list[dp.BBoxRecord] = []
    if args.metadata:
        examples, records, boxes = _prepare_from_metadata(args)
    else:
        examples, boxes = dp.generate_toy_dataset(_toy_spec(args))
        records = [dp.MetadataRecord(e.image_id, (dp.canonical_disease(e.disease),)) for e in examples]
    if args.test_manifest:
        _, test = dp.split_train_test(examples, test_ids=dp.read_manifest(args.test_manifest))
    else:
        _, test = dp.split_train_test(examples, float(args.split_ratio), int(args.seed))
    with open(out / "prompts.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "image_id", "prompt"])
        for e in examples:
            name = dp.prompt_filename(e.image_id, e.prompt, fmt)
            _write_image(out / name, e.image, fmt)
            w.writerow([name, e.image_id, ", ".join(e.prompt)])
    (out / "test_ids.txt").write_text("".join(f"{i}\n" for i in sorted(test.ids())), encoding="utf-8")
    with open(out / "metadata.csv", "w", encoding="utf-8", newline="") as fh:
        dp.write_metadata(records, fh)
    if boxes:
        with open(out / "bboxes.csv", "w", encoding="utf-8", newline="") as fh:
            dp.write_bboxes(boxes, fh)
    print(f"wrote {len(examples)} images to {out}")
    return 0


def _prepare_from_metadata(args):
    from PIL import Image

    if not args.images:
        raise UsageError("--metadata needs --images DIR")
    with open(args.metadata, encoding="utf-8", newline="") as fh:
        records = dp.parse_metadata(fh)
    images_dir = Path(args.images)
    sizes = {}
    for r in records:
        path = images_dir / r.image_id
        if path.exists():
            with Image.open(path) as im:
                sizes[r.image_id] = im.size
    first_box: dict[str, dp.BBoxRecord] = {}
    boxes = []
    if args.bboxes:
        with open(args.bboxes, encoding="utf-8", newline="") as fh:
            boxes = dp.parse_bboxes(fh, sizes)
        for b in boxes:
            first_box.setdefault(b.image_id, b)
    res = int(args.resolution)
    examples = []
    kept = []
    for r in records:
        if args.position_only and r.image_id not in first_box:
            continue
        path = images_dir / r.image_id
        if not path.exists():
            raise dp.DataError(f"{path}: image listed in {args.metadata} not found")
        with Image.open(path) as im:
            px = np.asarray(im.convert("L").resize((res, res), Image.BOX), dtype=np.uint8)
        box = first_box.get(r.image_id)
        prompt = dp.prompt_from_findings(r.findings, dp.position_phrase(box) if box else None)
        stem = Path(r.image_id).stem
        examples.append(dp.PromptedExample(stem, dp.from_uint8(px), tuple(prompt)))
        kept.append(dp.MetadataRecord(stem, r.findings))
    return examples, kept, boxes


# ---------------------------------------------------------------------------
# training


def _ckpt_name(kind: str, step: int) -> str:
    return f"{kind}_step{step:06d}.ckpt"


def _checkpoint_steps(total: int, every: int, start: int) -> set[int]:
    steps = {total}
    if every > 0:
        steps |= set(range(every, total + 1, every))
    return {s for s in steps if s > start}


class _Logs:
    def __init__(self, out: Path, kind: str, header: list[str], resume: bool):
        self.path = out / f"loss_{kind}.csv"
        mode = "a" if resume and self.path.exists() else "w"
        self.fh = open(self.path, mode, encoding="utf-8", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        if mode == "w":
            self.w.writerow(header)
        handler = logging.FileHandler(out / "train.log", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
        self.handler = handler

    def row(self, *vals) -> None:
        self.w.writerow([v if isinstance(v, (int, str)) else f"{v:.8g}" for v in vals])

    def close(self) -> None:
        self.fh.close()
        log.removeHandler(self.handler)
        self.handler.close()


def _diffusion_state(run: RunConfig, net: DenoiserNet, opt: AdamState, step: int) -> Checkpoint:
    names = [n for n, _ in net.named_parameters()]
    cfg = {**run.to_dict(), "step": step, "adam_t": opt.t, "run_id": run.run_id()}
    return Checkpoint("diffusion", cfg, {**pack_module("net", net), **pack_adam("adam", names, opt)})


def load_diffusion(ckpt: Checkpoint):
    if ckpt.kind != "diffusion":
        raise CheckpointError(f"expected a diffusion checkpoint, got {ckpt.kind!r}")
    m = ckpt.config["model"]
    net = DenoiserNet(DenoiserConfig(m["resolution"], tuple(m["channels"])), ckpt.config["seed"])
    net.load_state_dict(ckpt.section("net"))
    schedule = build_schedule(m["timesteps"], m["beta_start"], m["beta_end"])
    return net, schedule


def _gan_state(run: RunConfig, trainer: GanTrainer) -> Checkpoint:
    gn = [n for n, _ in trainer.gen.named_parameters()]
    dn = [n for n, _ in trainer.disc.named_parameters()]
    cfg = {**run.to_dict(), "step": trainer.step, "stage": trainer.gen.stage,
           "adam_g_t": trainer.opt_g.t, "adam_d_t": trainer.opt_d.t, "run_id": run.run_id()}
    blocks = {**pack_module("gen", trainer.gen), **pack_module("disc", trainer.disc),
              **pack_adam("adam_g", gn, trainer.opt_g), **pack_adam("adam_d", dn, trainer.opt_d)}
    return Checkpoint("pggan", cfg, blocks)


def _gan_objects(run: RunConfig) -> tuple[GanConfig, GrowthSchedule]:
    m, t = run.model, run.training
    cfg = GanConfig(latent_dim=m["latent_dim"], final_resolution=m["final_resolution"],
                    channels=tuple(m["channels"]), batch_size=t["batch_size"], lr=t["lr"])
    sched = GrowthSchedule.doubling(cfg.base_resolution, cfg.final_resolution, t["fade_steps"], t["stable_steps"])
    return cfg, sched


def load_gan(ckpt: Checkpoint, run: RunConfig | None = None) -> GanTrainer:
    if ckpt.kind != "pggan":
        raise CheckpointError(f"expected a pggan checkpoint, got {ckpt.kind!r}")
    run = run or _run_from(ckpt)
    cfg, sched = _gan_objects(run)
    trainer = GanTrainer(cfg, sched, run.seed)
    trainer.sync_stage(ckpt.config["stage"])
    trainer.gen.load_state_dict(ckpt.section("gen"))
    trainer.disc.load_state_dict(ckpt.section("disc"))
    unpack_adam(ckpt, "adam_g", [n for n, _ in trainer.gen.named_parameters()], trainer.opt_g, ckpt.config["adam_g_t"])
    unpack_adam(ckpt, "adam_d", [n for n, _ in trainer.disc.named_parameters()], trainer.opt_d, ckpt.config["adam_d_t"])
    trainer.step = ckpt.config["step"]
    if trainer.step:
        _, _, after = sched.fade(trainer.step)
        trainer.gen.alpha = trainer.disc.alpha = after
    return trainer


def _classifier_state(run: RunConfig, trainer: ClassifierTrainer) -> Checkpoint:
    names = [n for n, _ in trainer.net.named_parameters()]
    cfg = {**run.to_dict(), "step": trainer.step, "adam_t": trainer.opt.t, "run_id": run.run_id()}
    return Checkpoint("classifier", cfg, {**pack_module("net", trainer.net), **pack_adam("adam", names, trainer.opt)})


def _classifier_config(run: RunConfig) -> ClassifierConfig:
    m, t = run.model, run.training
    return ClassifierConfig(classes=tuple(m["classes"]), resolution=m["resolution"], channels=tuple(m["channels"]),
                            epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], seed=run.seed)


def load_classifier(ckpt: Checkpoint) -> ClassifierNet:
    if ckpt.kind != "classifier":
        raise CheckpointError(f"expected a classifier checkpoint, got {ckpt.kind!r}")
    net = ClassifierNet(_classifier_config(_run_from(ckpt)))
    net.load_state_dict(ckpt.section("net"))
    return net


def _run_from(ckpt: Checkpoint) -> RunConfig:
    c = ckpt.config
    return RunConfig(c["kind"], c["seed"], c["data"], c["model"], c["training"])


def _build_run(args, train: dp.Partition, data_desc: dict) -> RunConfig:
    kind, res = args.kind, int(train[0].image.shape[0])
    bs = int(args.batch_size)
    if kind == "diffusion":
        model = {"resolution": res, "channels": list(_ints(args.channels, "--channels")),
                 "timesteps": int(args.timesteps), "beta_start": float(args.beta_start), "beta_end": float(args.beta_end)}
        training = {"batch_size": bs, "lr": float(args.lr or 2e-3), "steps": int(args.steps or 2000)}
    elif kind == "pggan":
        final = int(args.final_resolution or res)
        model = {"latent_dim": int(args.latent_dim), "final_resolution": final,
                 "channels": list(_ints(args.gan_channels, "--gan-channels"))}
        training = {"batch_size": bs, "lr": float(args.lr or 1e-3),
                    "fade_steps": int(args.fade_steps), "stable_steps": int(args.stable_steps)}
        try:
            _, sched = _gan_objects(RunConfig(kind, 0, {}, model, training))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        training["steps"] = int(args.steps or sched.total_steps)
        if final != res:
            raise ConfigError(f"--final-resolution {final} differs from the {res}px training images")
    else:
        classes = sorted({e.disease for e in train}, key=dp.DISEASE_TOKENS.index)
        if args.classes_given:
            classes = [c.strip().lower() for c in str(args.classes).split(",") if c.strip()]
        model = {"resolution": res, "channels": [8, 16], "classes": classes}
        training = {"batch_size": bs, "lr": float(args.lr or 2e-3), "epochs": int(args.epochs)}
        steps_per_epoch = -(-len(_class_subset(train, classes)) // bs)
        training["steps"] = int(args.steps or int(args.epochs) * steps_per_epoch)
    return RunConfig(kind, int(args.seed), data_desc, model, training)


def _class_subset(train, classes) -> list[dp.PromptedExample]:
    return [e for e in train if e.disease in classes]


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume_ckpt = Checkpoint.load(args.resume) if args.resume else None
    if resume_ckpt is not None:
        if resume_ckpt.kind != args.kind:
            raise UsageError(f"--resume checkpoint is a {resume_ckpt.kind} run, not {args.kind}")
        run = _run_from(resume_ckpt)
        if args.steps:
            run.training["steps"] = int(args.steps)
        train, _ = _load_dataset(run.data)
    else:
        data_desc = _data_desc(args)
        train, _ = _load_dataset(data_desc)
        run = _build_run(args, train, data_desc)
    total = run.training["steps"]
    every = int(args.ckpt_every)
    start = resume_ckpt.config["step"] if resume_ckpt else 0
    if start > total:
        raise UsageError(f"checkpoint is at step {start}, beyond --steps {total}")
    save_at = _checkpoint_steps(total, every, start)
    log_header = {"diffusion": ["step", "loss"], "classifier": ["step", "loss"],
                  "pggan": ["step", "stage", "alpha", "loss_d", "loss_g"]}[run.kind]
    logs = _Logs(out, run.kind, log_header, resume_ckpt is not None)
    log.info("run %s kind=%s steps %d..%d", run.run_id(), run.kind, start + 1, total)
    try:
        if run.kind == "diffusion":
            _train_diffusion(run, train, resume_ckpt, start, total, save_at, out, logs)
        elif run.kind == "pggan":
            _train_gan(run, train, resume_ckpt, total, save_at, out, logs)
        else:
            _train_classifier(run, train, resume_ckpt, total, save_at, out, logs)
    finally:
        logs.close()
    print(f"trained {run.kind} to step {total}; checkpoints in {out}")
    return 0


def _train_diffusion(run, train, resume_ckpt, start, total, save_at, out, logs):
    m = run.model
    net = DenoiserNet(DenoiserConfig(m["resolution"], tuple(m["channels"])), run.seed)
    opt = AdamState(lr=run.training["lr"])
    if resume_ckpt is not None:
        net.load_state_dict(resume_ckpt.section("net"))
        unpack_adam(resume_ckpt, "adam", [n for n, _ in net.named_parameters()], opt, resume_ckpt.config["adam_t"])
    schedule = build_schedule(m["timesteps"], m["beta_start"], m["beta_end"])

    def on_step(step, loss):
        logs.row(step, loss)
        if step in save_at:
            _diffusion_state(run, net, opt, step).save(out / _ckpt_name("diffusion", step))
            log.info("checkpoint at step %d", step)

    train_diffusion(train, net, schedule, opt, total, run.training["batch_size"], run.seed, start, on_step)


def _train_gan(run, train, resume_ckpt, total, save_at, out, logs):
    if resume_ckpt is not None:
        trainer = load_gan(resume_ckpt, run)
    else:
        cfg, sched = _gan_objects(run)
        trainer = GanTrainer(cfg, sched, run.seed)
    if total > trainer.schedule.total_steps:
        raise ConfigError(f"--steps {total} exceeds the growth schedule ({trainer.schedule.total_steps} steps)")

    def on_step(rec):
        logs.row(rec.step, rec.stage, rec.alpha, rec.loss_d, rec.loss_g)
        if rec.step in save_at:
            _gan_state(run, trainer).save(out / _ckpt_name("pggan", rec.step))

    trainer.run(train, total, on_step)


def _train_classifier(run, train, resume_ckpt, total, save_at, out, logs):
    cfg = _classifier_config(run)
    trainer = ClassifierTrainer(_class_subset(train, cfg.classes), cfg)
    if resume_ckpt is not None:
        trainer.net.load_state_dict(resume_ckpt.section("net"))
        names = [n for n, _ in trainer.net.named_parameters()]
        unpack_adam(resume_ckpt, "adam", names, trainer.opt, resume_ckpt.config["adam_t"])
        trainer.step = resume_ckpt.config["step"]

    def on_step(step, loss):
        logs.row(step, loss)
        if step in save_at:
            _classifier_state(run, trainer).save(out / _ckpt_name("classifier", step))

    trainer.run(total, on_step)


# ---------------------------------------------------------------------------
# sampling and experiments


def cmd_sample(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    ckpt = Checkpoint.load(args.checkpoint)
    prompt = parse_prompt(args.prompt or "")
    count = int(args.count)
    if count < 1:
        raise UsageError("--count must be >= 1")
    if ckpt.kind == "diffusion":
        net, schedule = load_diffusion(ckpt)
        images = sample_prompts(net, schedule, [prompt] * count, int(args.seed))
    elif ckpt.kind == "pggan":
        images = _sample_gan(ckpt, prompt, count, args)
    else:
        raise UsageError(f"cannot sample from a {ckpt.kind} checkpoint")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        _write_image(out / f"sample_{i:03d}.{args.format}", img, args.format)
    print(f"wrote {len(images)} images to {out}")
    return 0


def _sample_gan(ckpt, prompt, count, args) -> list[np.ndarray]:
    from synthrad.autodiff import Tensor

    trainer = load_gan(ckpt)
    gen = trainer.gen
    rng = Rng(int(args.seed), 6)
    z = rng.normal((count, gen.config.latent_dim))
    diseases = [t for t in prompt if t in dp.DISEASE_TOKENS]
    if diseases:
        if not args.classifier:
            raise UsageError("a pggan prompt needs --classifier to derive the class latent")
        clf = load_classifier(Checkpoint.load(args.classifier))
        if diseases[0] not in clf.classes:
            raise UsageError(f"classifier knows {clf.classes}, not {diseases[0]!r}")
        latent = derive_class_latents(gen, classifier_scorer(clf), diseases[0], int(args.n_probe), rng.child(1))
        # samples spread around the class mean latent
        z = latent.vector[None, :] + np.float32(0.5) * z
    return list(gen(Tensor(z)).data[:, 0])


def diffusion_source(net, schedule, positions: bool):
    """Image source for the experiment: class prompts, with a random position for diseases."""

    def generate(token: str, n: int, seed: int) -> list[np.ndarray]:
        rng = Rng(seed, 7)
        picks = rng.integers(0, len(dp.POSITIONS), n)
        prompts = []
        for k in range(n):
            pos = dp.POSITIONS[int(picks[k])] if positions and token != "no finding" else None
            prompts.append(dp.prompt_from_findings([token], pos))
        out = []
        for i in range(0, n, 64):
            out.extend(sample_prompts(net, schedule, prompts[i:i + 64], seed * 7919 + i))
        return out

    return generate


def cmd_experiment(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    ckpt = Checkpoint.load(args.checkpoint)
    net, schedule = load_diffusion(ckpt)
    run = _run_from(ckpt)
    data_desc = _data_desc(args) if args.data else run.data
    train, test = _load_dataset(data_desc)
    positions = any(t in dp.POSITIONS for e in train for t in e.prompt)
    config = ExperimentConfig(
        disease=str(args.disease).lower(),
        rows=parse_rows(args.rows),
        test_size=int(args.test_size),
        classifier=ClassifierConfig(resolution=net.resolution, epochs=int(args.epochs), seed=int(args.seed)),
        seed=int(args.seed),
    )
    table = run_augmentation_experiment(config, diffusion_source(net, schedule, positions), train, test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(table.to_csv(), encoding="utf-8")
    (out / "results.txt").write_text(table.to_text(), encoding="utf-8")
    sys.stdout.write(table.to_text())
    return 0


def cmd_report_balance(args) -> int:
    if args.metadata:
        with open(args.metadata, encoding="utf-8", newline="") as fh:
            records = dp.parse_metadata(fh)
    elif args.data:
        with open(Path(args.data) / "metadata.csv", encoding="utf-8", newline="") as fh:
            records = dp.parse_metadata(fh)
    else:
        raise UsageError("report-balance needs --metadata CSV or --data DIR")
    text = class_balance_report(records).to_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="synthrad", description="Synthetic chest X-ray generation toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config", help="JSON file of option values")

    def toy(sp):
        sp.add_argument("--resolution", type=int)
        sp.add_argument("--samples-per-class", type=int)
        sp.add_argument("--classes", help="comma-separated class tokens")
        sp.add_argument("--no-positions", action="store_true", default=None)
        sp.add_argument("--noise", type=float)
        sp.add_argument("--split-ratio", type=float)

    sp = sub.add_parser("prepare-data", help="write a prompt-named image dataset")
    common(sp)
    toy(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--metadata", help="ChestX-ray14 style metadata CSV")
    sp.add_argument("--images", help="directory of source images named by Image Index")
    sp.add_argument("--bboxes", help="bounding-box CSV; adds position tokens")
    sp.add_argument("--position-only", action="store_true", help="keep only images with a bounding box")
    sp.add_argument("--test-manifest", help="newline-separated test image ids")
    sp.add_argument("--format", choices=["pgm", "png"])
    sp.set_defaults(func=cmd_prepare_data)

    sp = sub.add_parser("train", help="train a diffusion model, PG-GAN or classifier")
    common(sp)
    toy(sp)
    sp.add_argument("kind", choices=["diffusion", "pggan", "classifier"])
    sp.add_argument("--data", help="prepared dataset directory (default: toy dataset)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--ckpt-every", type=int)
    sp.add_argument("--resume")
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--timesteps", type=int)
    sp.add_argument("--beta-start", type=float)
    sp.add_argument("--beta-end", type=float)
    sp.add_argument("--channels")
    sp.add_argument("--final-resolution", type=int)
    sp.add_argument("--fade-steps", type=int)
    sp.add_argument("--stable-steps", type=int)
    sp.add_argument("--latent-dim", type=int)
    sp.add_argument("--gan-channels")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="generate images from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--prompt", help='e.g. "edema, top left"')
    sp.add_argument("--count", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--format", choices=["pgm", "png"])
    sp.add_argument("--classifier", help="classifier checkpoint (pggan class latents)")
    sp.add_argument("--n-probe", type=int)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("experiment", help="real vs real+synthetic classification experiment")
    common(sp)
    toy(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--rows", help="REAL:SYNTH pairs, e.g. 1000:0,500:500")
    sp.add_argument("--test-size", type=int)
    sp.add_argument("--disease")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("report-balance", help="per-class counts of a metadata file")
    common(sp)
    sp.add_argument("--metadata")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report_balance)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("synthrad: a command is required (prepare-data, train, sample, experiment, report-balance)")
        args = _resolve(args)
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (dp.DataError, UnknownTokenError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
