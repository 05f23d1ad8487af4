"""Training, generation, evaluation and the four-row ablation."""
from __future__ import annotations

import contextlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .autoencoder import VQVAE, export_global_embedding, image_to_tensor
from .checkpoint import Checkpoint, file_hash, pack_optimizer, unpack_optimizer
from .config import ABLATION_ROWS, Ablation, RunConfig, component_seed
from .data import CamoPair, DatasetManifest, to_uint8
from .diffusion import (InpaintModel, LatentBatch, NoiseSchedule, build_schedule, encode_pairs,
                        sample_inpaint, total_loss)
from .errors import CheckpointError, ConfigError, DataError
from .evaluation import DeskExtractor, evaluate_images, fid, gaussian_stats, kid
from .superpixel import SuperpixelMap, label_image

log = logging.getLogger("camoinpaint")

AE_KIND = "autoencoder"
LDM_KIND = "ldm"


@dataclass(frozen=True)
class TrainLogRecord:
    step: int
    L_diff: float
    L_bgrec: float
    total: float
    wall_time: float

    def __post_init__(self):
        if abs(self.total - (self.L_diff + self.L_bgrec)) > 1e-6 * max(1.0, abs(self.total)):
            raise ValueError("log record total != L_diff + L_bgrec")

    def to_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@contextlib.contextmanager
def run_lock(out_dir):
    """Refuse to run two training processes against the same output directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{out_dir} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _step_rng(master, name, step):
    return np.random.default_rng([component_seed(master, name), step])


# -- autoencoder ------------------------------------------------------------------


def build_autoencoder(config: RunConfig) -> VQVAE:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(component_seed(config.seed, "init-autoencoder"))
        return VQVAE(config.latent_factor, config.latent_channels, config.codebook_size, config.ae_hidden,
                     ema=config.ema_codebook, ema_decay=config.ema_decay)


def _ae_checkpoint(model, opt, config, step, usage):
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    otensors, ometa = pack_optimizer(opt)
    tensors.update(otensors)
    tensors["usage"] = usage
    return Checkpoint(AE_KIND, config.to_dict(), config.config_hash(), step, tensors, {"optim": ometa})


def load_autoencoder(path, config: RunConfig | None = None, allow_mismatch=False) -> tuple[VQVAE, Checkpoint]:
    ckpt = Checkpoint.load(path, AE_KIND)
    cfg = RunConfig(**ckpt.config)
    if config is not None:
        for key in ("image_size", "latent_factor", "latent_channels", "codebook_size", "ae_hidden"):
            if getattr(config, key) != getattr(cfg, key) and not allow_mismatch:
                raise CheckpointError(f"autoencoder checkpoint has {key}={getattr(cfg, key)}, "
                                      f"config wants {getattr(config, key)}")
    model = build_autoencoder(cfg)
    model.load_state_dict({k[6:]: v for k, v in ckpt.tensors.items() if k.startswith("model/")})
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, ckpt


def train_vqvae(config: RunConfig, pairs, out_dir, resume=False, max_steps=None):
    """Train the autoencoder to ``config.vq_steps`` (or ``max_steps``) and checkpoint it.

    Batch order is a pure function of (seed, step) so a resumed run sees the
    same batches an uninterrupted run would.
    """
    out_dir = Path(out_dir)
    ckpt_path = out_dir / "autoencoder.ckpt"
    log_path = out_dir / "vqvae_log.jsonl"
    if not pairs:
        raise DataError("no training pairs")
    images = image_to_tensor(np.stack([p.image for p in pairs]))
    with run_lock(out_dir):
        model = build_autoencoder(config)
        opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=config.vq_lr)
        usage = torch.zeros(config.codebook_size)
        step = 0
        if resume and ckpt_path.exists():
            ckpt = Checkpoint.load(ckpt_path, AE_KIND, config.config_hash())
            model.load_state_dict({k[6:]: v for k, v in ckpt.tensors.items() if k.startswith("model/")})
            unpack_optimizer(opt, ckpt.tensors, ckpt.meta["optim"])
            usage = ckpt.tensors["usage"].clone()
            step = ckpt.step
        elif log_path.exists():
            log_path.unlink()
        end = config.vq_steps if max_steps is None else min(config.vq_steps, step + max_steps)
        g = torch.Generator()
        t0 = time.time()
        model.train()
        with open(log_path, "a", buffering=1) as logf:
            while step < end:
                idx = _step_rng(config.seed, "vq-data", step).integers(len(images), size=config.vq_batch_size)
                x = images[torch.from_numpy(idx)]
                recon, loss, qr = model(x)
                opt.zero_grad()
                loss.backward()
                opt.step()
                usage += torch.bincount(qr.indices.flatten(), minlength=config.codebook_size).float()
                step += 1
                if step % 100 == 0 and step <= 0.7 * config.vq_steps:
                    g.manual_seed(component_seed(config.seed, f"vq-revive-{step}"))
                    with torch.no_grad():
                        z = model.encode(x)
                    model.revive_dead_codes(z, usage, g)
                    usage.zero_()
                if step % config.log_every == 0 or step == end:
                    mse = ((recon.detach().clamp(0, 1) - x) ** 2).mean().item()
                    logf.write(json.dumps({"step": step, "loss": loss.item(), "mse": mse,
                                           "wall_time": round(time.time() - t0, 3)}) + "\n")
        _ae_checkpoint(model, opt, config, step, usage).save(ckpt_path)
    model.eval()
    return model, ckpt_path


@torch.no_grad()
def reconstruction_mse(model: VQVAE, pairs) -> float:
    x = image_to_tensor(np.stack([p.image for p in pairs]))
    return float(((model.decode(model.encode(x)) - x) ** 2).mean())


# -- latent diffusion ---------------------------------------------------------------


def build_ldm(config: RunConfig, memory: torch.Tensor, ablation: Ablation) -> InpaintModel:
    return InpaintModel(config, memory, ablation, seed=config.seed)


def schedule_for(config: RunConfig) -> NoiseSchedule:
    return build_schedule(config.diffusion_steps, config.beta_start, config.beta_end)


def _ldm_checkpoint(model, opt, config, ablation, step, ae_hash):
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    otensors, ometa = pack_optimizer(opt)
    tensors.update(otensors)
    meta = {"ablation": asdict(ablation), "autoencoder_hash": ae_hash, "optim": ometa,
            "schedule": {"T": config.diffusion_steps, "beta_start": config.beta_start,
                         "beta_end": config.beta_end}}
    return Checkpoint(LDM_KIND, config.to_dict(), config.config_hash(), step, tensors, meta)


def load_ldm(path, autoencoder: VQVAE, ae_hash=None, config: RunConfig | None = None,
             allow_mismatch=False) -> tuple[InpaintModel, Checkpoint]:
    expect = config.config_hash() if config is not None else None
    ckpt = Checkpoint.load(path, LDM_KIND, expect, allow_mismatch)
    if ae_hash is not None and ckpt.meta["autoencoder_hash"] != ae_hash and not allow_mismatch:
        raise CheckpointError("diffusion checkpoint was trained against a different autoencoder")
    cfg = RunConfig(**ckpt.config)
    ablation = Ablation(**ckpt.meta["ablation"])
    model = build_ldm(cfg, export_global_embedding(autoencoder.codebook), ablation)
    model.load_state_dict({k[6:]: v for k, v in ckpt.tensors.items() if k.startswith("model/")})
    model.eval()
    return model, ckpt


def train_ldm(config: RunConfig, ablation: Ablation, autoencoder: VQVAE, latents: LatentBatch,
              out_dir, ae_hash="", resume=False, max_steps=None, fixed_batch=None, record_every=None):
    """Train denoiser (+ retrieval/fusion when enabled) and write ``ldm.ckpt`` and ``train_log.jsonl``.

    ``fixed_batch`` (a :class:`LatentBatch` plus fixed ``t`` and ``eps``)
    repeats one batch every step; used by the overfit smoke test.
    Returns (model, checkpoint path, log records).
    """
    out_dir = Path(out_dir)
    ckpt_path = out_dir / "ldm.ckpt"
    log_path = out_dir / "train_log.jsonl"
    schedule = schedule_for(config)
    memory = export_global_embedding(autoencoder.codebook)
    record_every = record_every or config.log_every
    records = []
    with run_lock(out_dir):
        model = build_ldm(config, memory, ablation)
        opt = torch.optim.Adam(model.parameters(), lr=config.ldm_lr)
        step = 0
        if resume and ckpt_path.exists():
            model, ckpt = load_ldm(ckpt_path, autoencoder, ae_hash or None, config)
            opt = torch.optim.Adam(model.parameters(), lr=config.ldm_lr)
            unpack_optimizer(opt, ckpt.tensors, ckpt.meta["optim"])
            step = ckpt.step
        elif log_path.exists():
            log_path.unlink()
        end = config.ldm_steps if max_steps is None else min(config.ldm_steps, step + max_steps)
        model.train()
        t0 = time.time()
        with open(log_path, "a", buffering=1) as logf:
            while step < end:
                if fixed_batch is not None:
                    batch, t, eps = fixed_batch
                else:
                    rng = _step_rng(config.seed, "ldm-data", step)
                    batch = latents.select(torch.from_numpy(rng.integers(len(latents), size=config.ldm_batch_size)))
                    g = torch.Generator()
                    g.manual_seed(component_seed(config.seed, f"ldm-noise-{step}"))
                    t = torch.randint(1, config.diffusion_steps + 1, (len(batch),), generator=g)
                    eps = torch.randn(batch.z0.shape, generator=g)
                loss, parts = total_loss(model, batch, t, eps, schedule)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                if step % record_every == 0 or step == end:
                    rec = TrainLogRecord(step, parts["L_diff"], parts["L_bgrec"],
                                         parts["L_diff"] + parts["L_bgrec"], round(time.time() - t0, 3))
                    records.append(rec)
                    logf.write(rec.to_line() + "\n")
        _ldm_checkpoint(model, opt, config, ablation, step, ae_hash).save(ckpt_path)
    model.eval()
    return model, ckpt_path, records


def read_train_log(path) -> list[TrainLogRecord]:
    return [TrainLogRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line]


# -- generation ----------------------------------------------------------------------


def _dump_debug(debug_dir, pairs, batch: LatentBatch, cond):
    debug_dir = Path(debug_dir)
    debug_dir.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(pairs):
        labels = batch.labels[i].numpy()
        n = int(labels.max()) + 1
        spx = SuperpixelMap(labels, np.zeros((n, 2)), np.zeros((n, 3)))
        label_image(spx).save(debug_dir / f"{p.id}_superpixels.png")
        if cond.attention is not None:
            a = cond.attention[i].numpy()  # (H, s, K)
            rows = a.reshape(-1, a.shape[-1]) if cond.attention.shape[2] > 1 else a[:, 0]
            np.savetxt(debug_dir / f"{p.id}_attention.txt", rows, fmt="%.6e",
                       header=f"rows: head-major (head, superpixel) of {a.shape[0]}x{a.shape[1]}; cols: K={a.shape[2]}")


def generate(ldm_path, ae_path, pairs, out_dir, seed=0, steps=None, debug_dir=None,
             config: RunConfig | None = None, allow_mismatch=False, batch_size=256):
    """Write one PNG and one JSON provenance sidecar per pair. Returns the output paths."""
    ae, _ = load_autoencoder(ae_path)
    ae_hash = file_hash(ae_path)
    model, ckpt = load_ldm(ldm_path, ae, ae_hash, config, allow_mismatch)
    cfg = RunConfig(**ckpt.config)
    schedule = schedule_for(cfg)
    steps = steps or cfg.sample_steps
    ldm_hash = file_hash(ldm_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        batch = encode_pairs(ae, chunk, cfg)
        trace = []
        imgs = sample_inpaint(model, ae, chunk, schedule, cfg, steps, seed + start, batch, trace)
        if debug_dir is not None:
            _dump_debug(debug_dir, chunk, batch, trace[0])
        for p, img in zip(chunk, imgs):
            path = out_dir / f"{p.id}.png"
            Image.fromarray(to_uint8(img)).save(path)
            side = {"id": p.id, "seed": seed, "batch_seed": seed + start, "steps": steps,
                    "checkpoint_sha256": ldm_hash, "autoencoder_sha256": ae_hash,
                    "config_hash": cfg.config_hash(), "ablation": model.ablation.name}
            (out_dir / f"{p.id}.json").write_text(json.dumps(side, sort_keys=True, indent=2) + "\n")
            written.append(path)
    return written


def foreground_audit(source: CamoPair, generated: np.ndarray) -> bool:
    """True iff every mask-0 pixel of ``generated`` equals the source at 8 bits."""
    fg = source.mask == 0
    return bool(np.array_equal(to_uint8(generated)[fg], to_uint8(source.image)[fg]))


# -- ablation -----------------------------------------------------------------------


def parameter_counts(config: RunConfig, autoencoder: VQVAE) -> dict:
    memory = export_global_embedding(autoencoder.codebook)
    ae = sum(p.numel() for p in autoencoder.parameters())
    out = {}
    for row in ABLATION_ROWS:
        m = build_ldm(config, memory, row)
        den = sum(p.numel() for p in m.denoiser.parameters())
        extra = m.extra_parameter_count()
        out[row.name] = {"autoencoder": ae, "denoiser": den, "retrieval_fusion": extra,
                         "total": ae + den + extra}
    return out


def _finished_run(run_dir, config, ablation, autoencoder, ae_hash):
    """(model, records, train seconds) if ``run_dir`` holds a completed run for this config."""
    path = Path(run_dir) / "ldm.ckpt"
    if not path.exists():
        return None
    try:
        model, ckpt = load_ldm(path, autoencoder, ae_hash, config)
    except CheckpointError:
        return None
    if ckpt.step != config.ldm_steps or model.ablation != ablation:
        return None
    records = read_train_log(Path(run_dir) / "train_log.jsonl")
    return model, records, records[-1].wall_time


def ablate(config: RunConfig, manifest: DatasetManifest, out_dir, seeds=(0, 1, 2), ldm_steps=None,
           progress=None):
    """Train the four ablation rows per seed and score each against held-out real images.

    The autoencoder is trained once and shared. Returns the report dict and
    also writes ``ablation.json`` and ``ablation.txt`` to ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    say = progress or (lambda msg: log.info(msg))
    size = config.image_size
    train_pairs = manifest.load("train", size)
    test_pairs = manifest.load("test", size)
    if not train_pairs or not test_pairs:
        raise DataError("ablation needs both train and test splits")
    cfg = config if ldm_steps is None else config.replace(ldm_steps=ldm_steps)

    ae_dir = out_dir / "autoencoder"
    if (ae_dir / "autoencoder.ckpt").exists():
        ae, _ = load_autoencoder(ae_dir / "autoencoder.ckpt", cfg)
    else:
        say("training autoencoder")
        ae, _ = train_vqvae(cfg, train_pairs, ae_dir)
        ae, _ = load_autoencoder(ae_dir / "autoencoder.ckpt", cfg)
    ae_hash = file_hash(ae_dir / "autoencoder.ckpt")
    ae_mse = reconstruction_mse(ae, test_pairs)
    say(f"autoencoder test reconstruction MSE {ae_mse:.5f}")

    train_lat = encode_pairs(ae, train_pairs, cfg)
    test_lat = encode_pairs(ae, test_pairs, cfg)
    extractor = DeskExtractor()
    ref_feats = extractor([p.image for p in test_pairs])
    ref_stats = gaussian_stats(ref_feats)
    schedule = schedule_for(cfg)

    runs = []
    for seed in seeds:
        scfg = cfg.replace(seed=seed)
        for row in ABLATION_ROWS:
            run_dir = out_dir / f"seed{seed}" / row.name
            t0 = time.time()
            done = _finished_run(run_dir, scfg, row, ae, ae_hash)
            if done is not None:
                model, records, train_s = done
                say(f"seed {seed} {row.name}: reusing finished run in {run_dir}")
            else:
                model, _, records = train_ldm(scfg, row, ae, train_lat, run_dir, ae_hash)
                train_s = time.time() - t0
            t0 = time.time()
            imgs = sample_inpaint(model, ae, test_pairs, schedule, scfg, seed=component_seed(seed, "sample"),
                                  batch=test_lat)
            sample_s = time.time() - t0
            feats = extractor(imgs)
            audit = all(foreground_audit(p, im) for p, im in zip(test_pairs, imgs))
            run = {"seed": seed, "row": row.name, "fid": fid(gaussian_stats(feats), ref_stats),
                   "kid": kid(feats, ref_feats, cfg.kid_block_size),
                   "final_L_diff": records[-1].L_diff, "final_L_bgrec": records[-1].L_bgrec,
                   "train_seconds": round(train_s, 2), "images_per_second": round(len(imgs) / sample_s, 3),
                   "foreground_preserved": audit}
            if seed == seeds[0]:
                pv = out_dir / "previews" / f"{row.name}.png"
                pv.parent.mkdir(parents=True, exist_ok=True)
                grid = np.concatenate([np.concatenate(imgs[r * 8:(r + 1) * 8], 1) for r in range(4)], 0)
                Image.fromarray(to_uint8(grid)).save(pv)
            say(f"seed {seed} {row.name:>16}: FID {run['fid']:.4f} KID {run['kid']:.5f} "
                f"({train_s:.0f}s train)")
            runs.append(run)

    params = parameter_counts(cfg, ae)
    rows = []
    base_total = params["base"]["total"]
    for row in ABLATION_ROWS:
        rr = [r for r in runs if r["row"] == row.name]
        rows.append({"row": row.name, "bkrm": row.bkrm, "rcem": row.rcem, "lmp": row.lmp,
                     "fid_mean": float(np.mean([r["fid"] for r in rr])),
                     "fid_std": float(np.std([r["fid"] for r in rr])),
                     "kid_mean": float(np.mean([r["kid"] for r in rr])),
                     "kid_std": float(np.std([r["kid"] for r in rr])),
                     "params": params[row.name]["total"],
                     "params_delta": params[row.name]["total"] - base_total,
                     "images_per_second": float(np.mean([r["images_per_second"] for r in rr]))})
    report = {"rows": rows, "runs": runs, "parameter_counts": params, "seeds": list(seeds),
              "config": cfg.to_dict(), "config_hash": cfg.config_hash(), "extractor_id": extractor.id,
              "autoencoder_test_mse": ae_mse, "n_train": len(train_pairs), "n_test": len(test_pairs),
              "published_comparable": False}
    (out_dir / "ablation.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    (out_dir / "ablation.txt").write_text(format_ablation_table(report))
    return report


def format_ablation_table(report) -> str:
    lines = [f"Ablation ({report['extractor_id']}; desk-scale values, NOT comparable to published FID/KID)",
             f"{'BKRM':>5} {'RCEM':>5} {'LMP':>5} {'Params':>10} {'dParams':>8} {'img/s':>8} "
             f"{'FID':>16} {'KID':>18}"]
    mark = lambda b: "x" if b else "-"
    for r in report["rows"]:
        lines.append(f"{mark(r['bkrm']):>5} {mark(r['rcem']):>5} {mark(r['lmp']):>5} {r['params']:>10d} "
                     f"{r['params_delta']:>+8d} {r['images_per_second']:>8.2f} "
                     f"{r['fid_mean']:>8.4f}±{r['fid_std']:<7.4f} {r['kid_mean']:>9.5f}±{r['kid_std']:<8.5f}")
    base, full = report["rows"][0], report["rows"][-1]
    lines.append(f"full vs base: FID {100 * (base['fid_mean'] - full['fid_mean']) / base['fid_mean']:+.2f}%  "
                 f"KID {100 * (base['kid_mean'] - full['kid_mean']) / max(base['kid_mean'], 1e-12):+.2f}%")
    return "\n".join(lines) + "\n"
