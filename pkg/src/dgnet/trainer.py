"""Joint training loop: teacher pre-training, alternating generator/discriminator phases, checkpoints."""
from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, dump_config, net_fingerprint
from .data import ReidDataset, SamplingError, sample_identity_batch
from .networks import DGNet, TeacherModel, rgb_to_gray
from .objectives import (
    LossReport, adv_loss_d_from_maps, adv_loss_g, code_recon_loss, grad_penalty, id_loss,
    img_recon_loss, prim_loss, schedule, total_loss, write_metrics,
)

log = logging.getLogger(__name__)

STREAMS = {"model_init": 0, "teacher_init": 1, "batches": 2, "teacher_batches": 3, "eval": 4}


class CheckpointError(ValueError):
    pass


def seed_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one subsystem, derived from the root seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, STREAMS[name]]))


def torch_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, STREAMS[name]]).generate_state(1, np.uint64)[0] >> 1)


def set_deterministic(enabled: bool = True):
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def flip_batch(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    mask = torch.from_numpy(rng.random(x.shape[0]) < 0.5)
    return torch.where(mask.view(-1, 1, 1, 1), x.flip(-1), x)


def _freeze(module, frozen: bool):
    for p in module.parameters():
        p.requires_grad_(not frozen)


def _as_float(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


# ---------------------------------------------------------------------------
# teacher

def train_teacher(cfg: RunConfig, ds: ReidDataset, log_every: int = 0) -> TeacherModel:
    """Baseline identity classifier trained with cross-entropy on the real training set, then frozen."""
    tc = cfg.train
    torch.manual_seed(torch_seed(cfg.seed, "teacher_init"))
    teacher = TeacherModel(cfg.net)
    rng = seed_stream(cfg.seed, "teacher_batches")
    images = ds.stack()
    labels = torch.from_numpy(ds.labels())
    keep = labels > 0
    images, labels = images[keep], labels[keep]
    opt = torch.optim.SGD(teacher.parameters(), lr=tc.teacher_lr, momentum=0.9, weight_decay=5e-4)
    teacher.train()
    batch = min(tc.teacher_batch, len(labels))
    for it in range(tc.teacher_iters):
        idx = torch.from_numpy(rng.choice(len(labels), size=batch, replace=False))
        x = images[idx]
        if tc.flip:
            x = flip_batch(x, rng)
        loss = id_loss(teacher(x), labels[idx])
        if not torch.isfinite(loss):
            raise FloatingPointError(f"teacher loss became {loss.item()} at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log_every and it % log_every == 0:
            log.info("teacher iter %d loss %.4f", it, loss.item())
    return teacher.freeze()


@torch.no_grad()
def classification_accuracy(model, images: torch.Tensor, labels: torch.Tensor, batch: int = 64) -> float:
    model.eval()
    preds = torch.cat([model(images[i:i + batch]).argmax(1) + 1 for i in range(0, len(images), batch)])
    return (preds == labels).float().mean().item()


def save_teacher(teacher: TeacherModel, cfg: RunConfig, path):
    torch.save({"kind": "teacher", "fingerprint": net_fingerprint(cfg.net),
                "state": teacher.state_dict(), "config": dump_config(cfg)}, path)


def load_teacher(path, cfg: RunConfig) -> TeacherModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"teacher checkpoint {path} not found")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "teacher":
        raise CheckpointError(f"{path} is not a teacher checkpoint")
    if blob["fingerprint"] != net_fingerprint(cfg.net):
        raise CheckpointError(f"{path}: network config fingerprint mismatch")
    teacher = TeacherModel(cfg.net)
    teacher.load_state_dict(blob["state"])
    return teacher.freeze()


# ---------------------------------------------------------------------------
# joint training

@dataclass
class GenContext:
    """Tensors from the generator phase reused by the discriminator phase."""
    real: torch.Tensor
    labels: torch.Tensor
    cross_labels: torch.Tensor
    fake: torch.Tensor
    app_code: torch.Tensor
    struct_code: torch.Tensor
    weights: object = None
    teacher_logits: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)


class Trainer:
    """Owns the model, the teacher, the three optimizers and the sampling RNG."""

    def __init__(self, cfg: RunConfig, ds: ReidDataset, teacher: TeacherModel | None = None):
        if cfg.net.num_classes != ds.num_identities:
            raise ValueError(f"net.num_classes={cfg.net.num_classes} but dataset has "
                             f"{ds.num_identities} identities")
        if ds.num_identities < 2:
            raise SamplingError("cross-identity training needs at least two identities")
        tc = cfg.train
        if tc.joint:
            if teacher is None:
                raise ValueError("joint training needs a teacher model")
            if cfg.weights.warmup_start_iter >= tc.total_iters:
                raise ValueError("weights.warmup_start_iter must be below train.total_iters in joint mode")
        self.cfg = cfg
        self.ds = ds
        self.teacher = teacher.freeze() if teacher is not None else None
        if tc.deterministic:
            set_deterministic(True)
        torch.manual_seed(torch_seed(cfg.seed, "model_init"))
        self.model = DGNet(cfg.net)
        m = self.model
        self.opt_app = torch.optim.SGD(m.app_encoder.parameters(), lr=tc.lr_app, momentum=tc.momentum_app)
        self.opt_gen = torch.optim.Adam(list(m.struct_encoder.parameters()) + list(m.decoder.parameters()),
                                        lr=tc.lr_gen, betas=tuple(tc.adam_betas))
        self.opt_dis = torch.optim.Adam(m.discriminator.parameters(), lr=tc.lr_gen, betas=tuple(tc.adam_betas))
        self.rng = seed_stream(cfg.seed, "batches")
        self.iteration = 0
        self.images = ds.stack()
        self.labels = torch.from_numpy(ds.labels())

    # -- data -------------------------------------------------------------
    def next_batch(self):
        idx = sample_identity_batch(self.ds, self.cfg.train.batch_size, self.rng,
                                    self.cfg.train.instances_per_id)
        idx = torch.tensor(idx)
        x = self.images[idx]
        if self.cfg.train.flip:
            x = flip_batch(x, self.rng)
        return x, self.labels[idx]

    def weights(self, iteration=None):
        return self._effective(schedule(self.iteration if iteration is None else iteration, self.cfg.weights))

    def _effective(self, weights):
        w = weights if weights is not None else self.weights()
        if not self.cfg.train.joint:
            w = replace(w, lambda_prim=0.0, lambda_fine=0.0)
        return w

    # -- generator phase ----------------------------------------------------
    def generator_terms(self, x: torch.Tensor, y: torch.Tensor, weights=None):
        """All generator-side loss terms as tensors, plus the context for the D phase.

        Batch layout: ``x[n ^ 1]`` is the same-id partner of ``x[n]`` and
        ``x.roll(2)`` holds a different identity at every position.
        """
        w = self._effective(weights)
        m = self.model
        enc = m.app_encoder
        inst = self.cfg.train.instances_per_id
        b = x.shape[0]
        partner = torch.arange(b) ^ 1
        y_cross = y.roll(inst, 0)  # structure-source identity of each cross-id image

        a = enc.encode(x)
        s = m.encode_structure(x)
        a_t, s_j = a[partner], s.roll(inst, 0)
        out = m.decode(torch.cat([a, a_t, a]), torch.cat([s, s, s_j]))
        x_self, x_same, x_cross = out.split(b)

        f_prim, _ = enc.features(a)
        a_re = enc.encode(x_cross)
        s_re = m.struct_encoder(rgb_to_gray(x_cross))
        g_prim, g_fine = enc.features(a_re)
        logits_cross = enc.classify(g_prim, "primary_head")

        terms = {
            "img_recon1": img_recon_loss(x, x_self),
            "img_recon2": img_recon_loss(x, x_same),
            "code_recon1": code_recon_loss(a, a_re),
            "code_recon2": code_recon_loss(s_j, s_re),
            "id_self": id_loss(enc.classify(f_prim, "primary_head"), y),
            "id_cross": id_loss(logits_cross, y),
            "adv_g": adv_loss_g(m.discriminator, x_cross),
        }
        teacher_logits = None
        if w.lambda_prim > 0 or w.lambda_fine > 0:
            if self.teacher is None:
                raise ValueError("primary/fine losses need a teacher")
            with torch.no_grad():
                teacher_logits = self.teacher(x_cross)
            if self.cfg.train.detach_g_for_prim:
                g_prim, g_fine = enc.features(enc.encode(x_cross.detach()))
                logits_cross = enc.classify(g_prim, "primary_head")
            terms["prim"] = prim_loss(logits_cross, teacher_logits)
            terms["fine"] = id_loss(enc.classify(g_fine, "fine_head"), y_cross)
        else:
            terms["prim"] = terms["fine"] = torch.zeros((), dtype=x.dtype)
        ctx = GenContext(x, y, y_cross, x_cross.detach(), a.detach(), s_j.detach(), w, teacher_logits)
        return terms, ctx

    def train_step_generator(self, x, y, weights=None):
        """Update E_a, E_s and G with the D parameters frozen."""
        w = self._effective(weights)
        m = self.model
        m.train()
        _freeze(m.discriminator, True)
        try:
            terms, ctx = self.generator_terms(x, y, w)
            report = LossReport(**{k: _as_float(v) for k, v in terms.items()})
            report.total = total_loss(report.as_dict(), w)
            report.check_finite()
            loss = total_loss(terms, w)
            self.opt_app.zero_grad(set_to_none=True)
            self.opt_gen.zero_grad(set_to_none=True)
            loss.backward()
            self.opt_app.step()
            self.opt_gen.step()
        finally:
            _freeze(m.discriminator, False)
        return report, ctx

    # -- discriminator phase -------------------------------------------------
    def train_step_discriminator(self, ctx: GenContext):
        """Update D on real vs detached generated images with the R1 penalty.

        With ``encoders_in_d_phase`` the encoders are also updated from the
        losses that sit after the generated image (code reconstruction and
        identity terms on the detached image); G never changes here.
        """
        m = self.model
        w = ctx.weights
        m.train()
        _freeze(m.decoder, True)
        try:
            real_maps = m.discriminator(ctx.real)
            fake_maps = m.discriminator(ctx.fake)
            adv_d = adv_loss_d_from_maps(real_maps, fake_maps)
            gp = grad_penalty(m.discriminator, ctx.real, self.cfg.weights.r1_gamma)
            report = LossReport(adv_d=_as_float(adv_d), grad_penalty=_as_float(gp))
            report.total = report.adv_d + report.grad_penalty
            report.check_finite()
            self.opt_dis.zero_grad(set_to_none=True)
            (adv_d + gp).backward()
            self.opt_dis.step()

            if self.cfg.train.encoders_in_d_phase:
                enc = m.app_encoder
                a_re = enc.encode(ctx.fake)
                s_re = m.struct_encoder(rgb_to_gray(ctx.fake))
                g_prim, g_fine = enc.features(a_re)
                logits = enc.classify(g_prim, "primary_head")
                enc_terms = {
                    "code_recon1": code_recon_loss(ctx.app_code, a_re),
                    "code_recon2": code_recon_loss(ctx.struct_code, s_re),
                    "id_cross": id_loss(logits, ctx.labels),
                }
                if ctx.teacher_logits is not None:
                    enc_terms["prim"] = prim_loss(logits, ctx.teacher_logits)
                    enc_terms["fine"] = id_loss(enc.classify(g_fine, "fine_head"), ctx.cross_labels)
                enc_loss = total_loss(enc_terms, w)
                if not torch.isfinite(enc_loss):
                    raise FloatingPointError(f"encoder loss in D phase is {enc_loss.item()}")
                self.opt_app.zero_grad(set_to_none=True)
                self.opt_gen.zero_grad(set_to_none=True)
                enc_loss.backward()
                self.opt_app.step()
                self.opt_gen.step()  # decoder grads are None, so only E_s moves
        finally:
            _freeze(m.decoder, False)
        return report

    # -- loop -----------------------------------------------------------------
    def step(self) -> dict[str, float]:
        w = self.weights()
        x, y = self.next_batch()
        g_report, ctx = self.train_step_generator(x, y, w)
        d_report = self.train_step_discriminator(ctx)
        values = {k: v for k, v in g_report.as_dict().items() if k not in ("adv_d", "grad_penalty", "total")}
        values["g_total"] = g_report.total
        values["adv_d"] = d_report.adv_d
        values["grad_penalty"] = d_report.grad_penalty
        values["d_total"] = d_report.total
        values["lambda_prim"] = w.lambda_prim
        values["lambda_fine"] = w.lambda_fine
        self.iteration += 1
        return values

    def fit(self, out_dir, until: int | None = None, log_every: int = 100):
        """Run to ``until`` (default ``total_iters``), appending to ``metrics.tsv`` in ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        until = self.cfg.train.total_iters if until is None else until
        every = self.cfg.train.checkpoint_every
        with open(out / "metrics.tsv", "a") as handle:
            while self.iteration < until:
                it = self.iteration
                values = self.step()
                write_metrics(handle, it, values)
                if log_every and it % log_every == 0:
                    log.info("iter %d g_total %.4f d_total %.4f img_recon1 %.4f", it,
                             values["g_total"], values["d_total"], values["img_recon1"])
                if every and self.iteration % every == 0:
                    handle.flush()
                    self.save(out / f"ckpt_{self.iteration:06d}.pt")
        self.save(out / "final.pt")
        return out

    # -- checkpoints ------------------------------------------------------------
    def state(self) -> dict:
        return {
            "kind": "dgnet",
            "fingerprint": net_fingerprint(self.cfg.net),
            "config": dump_config(self.cfg),
            "iteration": self.iteration,
            "model": self.model.state_dict(),
            "opt_app": self.opt_app.state_dict(),
            "opt_gen": self.opt_gen.state_dict(),
            "opt_dis": self.opt_dis.state_dict(),
            "rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }

    def save(self, path):
        torch.save(self.state(), path)

    def restore(self, path):
        blob = load_checkpoint(path, self.cfg)
        self.model.load_state_dict(blob["model"])
        self.opt_app.load_state_dict(blob["opt_app"])
        self.opt_gen.load_state_dict(blob["opt_gen"])
        self.opt_dis.load_state_dict(blob["opt_dis"])
        self.rng.bit_generator.state = blob["rng"]
        torch.set_rng_state(blob["torch_rng"])
        self.iteration = blob["iteration"]
        return self


def load_checkpoint(path, cfg: RunConfig) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "dgnet":
        raise CheckpointError(f"{path} is not a DG-Net checkpoint")
    if blob["fingerprint"] != net_fingerprint(cfg.net):
        raise CheckpointError(f"{path}: network config fingerprint mismatch")
    return blob


def load_model(path, cfg: RunConfig) -> DGNet:
    blob = load_checkpoint(path, cfg)
    model = DGNet(cfg.net)
    model.load_state_dict(blob["model"])
    return model.eval()


def train(cfg: RunConfig, ds: ReidDataset, out_dir, teacher: TeacherModel | None = None,
          resume: str | None = None) -> Trainer:
    """Build a trainer (optionally resumed) and run it to ``cfg.train.total_iters``."""
    random.seed(cfg.seed)
    trainer = Trainer(cfg, ds, teacher)
    if resume:
        trainer.restore(resume)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(dump_config(cfg))
    trainer.fit(out)
    return trainer
