"""Training orchestration: loss composition across levels, the optimization
loop with checkpointing and JSON-lines metrics, the adversarial phase, the
gradient-check report and evaluation.

Per-step randomness comes from a generator derived from (seed, step), so an
aborted run resumed from a checkpoint replays bit-identical trajectories.
"""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import generation as G
from . import inlevel_coherence as C
from . import recon_losses as R
from .config import RunConfig
from .corpus import RESERVED
from .generation import AdversarialBundle, Discriminators, Generators, NoiseStats
from .hier_encoder import HierEncoder
from .inlevel_coherence import CoherenceCheckers, MlmHeads
from .numerics import Adam, ParameterStore, Tensor, checkpoint, grad_check, tensor as T
from .pndb import PNDB
from .recon_losses import DecoderStack

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    """Non-finite loss/gradients or a failed gradient check."""


def step_rng(seed, step, purpose=0):
    """Deterministic per-step random stream."""
    return np.random.default_rng(np.random.SeedSequence((seed, step, purpose)))


class Model:
    """All components over one parameter store; creation order is fixed so
    checkpoints are byte-reproducible."""

    def __init__(self, cfg, vocab_size, seed=None):
        self.cfg = cfg
        self.store = ParameterStore()
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed if seed is None else seed, 0xC0FFEE)))
        self.encoder = HierEncoder(self.store, cfg, vocab_size, rng)
        self.stack = DecoderStack(self.store, cfg, self.encoder, rng)
        self.heads = MlmHeads(self.store, cfg, self.encoder, rng)
        self.checkers = CoherenceCheckers(self.store, cfg, rng)
        self.pndb = PNDB(self.store, cfg, rng) if cfg.pndb_mode != "off" else None
        self.generators = Generators(self.store, cfg, rng)
        self.discriminators = Discriminators(self.store, cfg, rng)
        self.noise = NoiseStats(self.store, cfg)

    # parameter groups -----------------------------------------------------------

    def gan_generator_names(self):
        names = Generators.param_names(self.store)
        if self.pndb is not None:
            names += self.pndb.generator_param_names(self.store)
        return names

    def gan_discriminator_names(self):
        return Discriminators.param_names(self.store)

    def main_names(self):
        gan = set(self.gan_generator_names()) | set(self.gan_discriminator_names())
        return [n for n in self.store.names() if n not in gan]


# -- loss composition -------------------------------------------------------------------


def _pndb_write(model, dvt):
    doc_of_sent = dvt.doc_of[dvt.batch.level_names[1]]
    pooled, a_i = model.pndb.write(dvt.context["token"], dvt.real_mask["token"],
                                   doc_of_sent, dvt.batch.n_docs)
    if model.cfg.pndb_mode == "leave_one_out":
        per_sentence = model.pndb.pooled_answers_leave_one_out(
            a_i, doc_of_sent, dvt.batch.n_docs)
    else:
        per_sentence = pooled[doc_of_sent]
    return pooled, per_sentence


def _recon_token(model, batch, dvt, per_sentence_answers):
    sent_level = batch.level_names[1]
    memory = model.stack.decompress("token", dvt.vectors[sent_level])
    decomp_out = memory
    if per_sentence_answers is not None:
        memory = model.pndb.read_update(memory, per_sentence_answers)
    teacher_ids = np.concatenate(
        [np.zeros((batch.token_ids.shape[0], 1), dtype=np.int64),
         batch.token_ids[:, :-1]], axis=1)
    teacher = model.encoder.embed_tokens(teacher_ids)
    decoded = model.stack.decode("token", memory, teacher)
    logits = model.stack.token_logits(decoded)
    loss = R.token_reconstruction_loss(logits, batch.token_ids, batch.token_real_mask())
    return loss, decomp_out


def _frozen_label(cache, key, builder):
    """Detached label tensors; with a cache they stay pinned at the base
    point so the finite-difference oracle sees the same constants the
    analytic gradient does."""
    if cache is None:
        return builder().detach()
    if key not in cache:
        cache[key] = builder().detach()
    return cache[key]


def _recon_level(model, batch, dvt, parent_level, label_cache=None):
    names = batch.level_names
    child_level = names[names.index(parent_level) - 1]
    child_vecs = dvt.vectors[child_level]
    memory = model.stack.decompress(child_level, dvt.vectors[parent_level])
    target_mat, _, _ = model.encoder.assemble_child_matrix(parent_level, child_vecs, batch)
    teacher = model.stack.shift_right(child_level, target_mat)
    decoded = model.stack.decode(child_level, memory, teacher)
    eos = model.encoder.level_vector(child_level, "eos")
    candidates = _frozen_label(
        label_cache, f"recon/{child_level}",
        lambda: T.concat([child_vecs, eos.reshape(1, -1)], axis=0))
    tgt_idx, real = R.level_targets(batch, parent_level, child_vecs.shape[0])
    loss = R.level_reconstruction_loss(decoded, tgt_idx, candidates, real)
    return loss, memory


def _mlm_token(model, batch, dvt, per_sentence_answers, rng):
    slot = np.arange(batch.caps["token"])[None, :]
    content = slot < (batch.token_len - 1)[:, None]  # EoS slot excluded
    plan = C.plan_token_mlm(batch.token_ids, content, model.cfg.mlm_rate,
                            model.encoder.vocab_size, rng)
    if plan.n_selected == 0:
        return Tensor(0.0), False
    corrupted = C.corrupt_token_ids(batch.token_ids, plan)
    emb = model.encoder.embed_tokens(corrupted)
    ctx = model.encoder.encode_children("token", emb, batch.token_real_mask())
    if per_sentence_answers is not None:
        ctx = model.pndb.read_update(ctx, per_sentence_answers)
    rows, cols = np.nonzero(plan.selected)
    picked = ctx[rows, cols]
    logits = model.heads.token_logits(picked)
    return C.mlm_loss(logits, batch.token_ids[rows, cols])


def _mlm_level(model, batch, dvt, child_level, rng, label_cache=None):
    names = batch.level_names
    parent_level = names[names.index(child_level) + 1]
    base = dvt.vectors[child_level]
    n = base.shape[0]
    plan = C.plan_vector_mlm(n, model.cfg.mlm_rate, n, rng)
    if plan.n_selected == 0:
        return Tensor(0.0), False
    mask_vec = model.encoder.level_vector(child_level, "mask")
    corrupted = C.apply_mlm_corruption(base, plan, mask_vec, base)
    matrix, real, _ = model.encoder.assemble_child_matrix(parent_level, corrupted, batch)
    ctx = model.encoder.encode_children(child_level, matrix, real)
    sel = np.nonzero(plan.selected)[0]
    parents = batch.parent[child_level][sel]
    slots = sel - batch.child_start[parent_level][parents]
    picked = ctx[parents, slots]
    candidates = _frozen_label(label_cache, f"mlm/{child_level}", lambda: base)
    logits = model.heads.level_logits(child_level, picked, candidates)
    return C.mlm_loss(logits, sel)


def _coherence_token(model, batch, rng):
    sent_level = batch.level_names[1]
    content_counts = batch.token_len - 1
    pool = model.encoder.vocab_size - len(RESERVED)
    plan = C.plan_coherence(content_counts, batch.caps["token"], pool, rng)
    ids = batch.token_ids.copy()
    ids[plan.replaced] = plan.random_pick[plan.replaced] + len(RESERVED)
    emb = model.encoder.embed_tokens(ids)
    mask = batch.token_real_mask()
    ctx = model.encoder.encode_children("token", emb, mask, segments=plan.segments)
    parent = model.encoder.compress("token", ctx, mask)
    pred = model.checkers.predict(sent_level, parent)
    return C.coherence_loss(pred, plan.true_ratio), parent, plan


def _coherence_level(model, batch, dvt, parent_level, rng):
    names = batch.level_names
    child_level = names[names.index(parent_level) - 1]
    base = dvt.vectors[child_level]
    cap = batch.caps[child_level]
    plan = C.plan_coherence(batch.child_count[parent_level], cap, base.shape[0], rng)
    matrix, real, _ = model.encoder.assemble_child_matrix(parent_level, base, batch)
    corrupted = C.apply_coherence_replacement(matrix, plan, base)
    ctx = model.encoder.encode_children(child_level, corrupted, real, segments=plan.segments)
    parent = model.encoder.compress(child_level, ctx, real)
    pred = model.checkers.predict(parent_level, parent)
    return C.coherence_loss(pred, plan.true_ratio), parent, plan


def total_loss(model, batch, rng, ae_eps, components=None, label_cache=None):
    """Weighted sum of every enabled component plus the AE regularizer.

    Returns (total, {component: Tensor}, dvt).  ``components`` restricts the
    set (used by check-grads); names follow "family/level".  ``label_cache``
    pins detached label tensors across calls for the gradient oracle.
    """
    cfg = model.cfg
    names = batch.level_names
    dvt = model.encoder.build_dvt(batch)
    per_sentence_answers = None
    if model.pndb is not None:
        _, per_sentence_answers = _pndb_write(model, dvt)

    want = (lambda name: components is None or name in components)
    comps = {}

    # downward reconstruction + AE regularizer per compressor/decompressor pair
    if want("recon/token") or want("ae/token"):
        loss, decomp_out = _recon_token(model, batch, dvt, per_sentence_answers)
        if want("recon/token"):
            comps["recon/token"] = loss
        if want("ae/token"):
            ae, _ = R.ae_regularizer(dvt.context["token"], decomp_out,
                                     dvt.real_mask["token"], ae_eps, level="token")
            if ae is not None:
                comps["ae/token"] = ae
    for parent_level in names[2:]:
        child_level = names[names.index(parent_level) - 1]
        if want(f"recon/{child_level}") or want(f"ae/{child_level}"):
            loss, memory = _recon_level(model, batch, dvt, parent_level,
                                        label_cache=label_cache)
            if want(f"recon/{child_level}"):
                comps[f"recon/{child_level}"] = loss
            if want(f"ae/{child_level}"):
                ae, _ = R.ae_regularizer(dvt.context[child_level], memory,
                                         dvt.real_mask[child_level], ae_eps,
                                         level=child_level)
                if ae is not None:
                    comps[f"ae/{child_level}"] = ae

    # in-level masked modeling (token and every level with siblings; no top)
    if want("mlm/token"):
        loss, used = _mlm_token(model, batch, dvt, per_sentence_answers,
                                step_rng_from(rng))
        if used:
            comps["mlm/token"] = loss
    for child_level in names[1:-1]:
        if want(f"mlm/{child_level}"):
            loss, used = _mlm_level(model, batch, dvt, child_level, step_rng_from(rng),
                                    label_cache=label_cache)
            if used:
                comps[f"mlm/{child_level}"] = loss

    # coherence per parent level (its Checker consumes the rebuilt parent)
    if want(f"coherence/{names[1]}"):
        loss, _, _ = _coherence_token(model, batch, step_rng_from(rng))
        comps[f"coherence/{names[1]}"] = loss
    for parent_level in names[2:]:
        if want(f"coherence/{parent_level}"):
            loss, _, _ = _coherence_level(model, batch, dvt, parent_level,
                                          step_rng_from(rng))
            comps[f"coherence/{parent_level}"] = loss

    total = None
    for name, value in comps.items():
        family, _, level = name.partition("/")
        w = 1.0 if family == "ae" else cfg.weight(family, level)
        if w == 0.0:
            continue
        term = value * Tensor(w)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("all loss components disabled")
    return total, comps, dvt


def step_rng_from(rng):
    """Child stream: keeps component sampling order-independent."""
    return np.random.default_rng(rng.integers(0, 2 ** 63))


# -- metrics ------------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    step: int
    total: float
    components: dict
    grad_norm: float
    ae_eps: float
    wall_time: float

    def to_json(self):
        row = {"step": self.step, "total": self.total}
        row.update({k: v for k, v in sorted(self.components.items())})
        row.update({"grad_norm": self.grad_norm, "ae_eps": self.ae_eps,
                    "wall_time": self.wall_time})
        return json.dumps(row)


class MetricsWriter:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []
        self._last_step = -1
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8")
        else:
            self._fh = None

    def append(self, record):
        if record.step <= self._last_step:
            raise ValueError("metrics steps must strictly increase")
        self._last_step = record.step
        self.records.append(record)
        if self._fh:
            self._fh.write(record.to_json() + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


# -- trainer ------------------------------------------------------------------------------


class Trainer:
    def __init__(self, cfg, vocab, batches, out_dir=None):
        if not batches:
            raise ValueError("no training batches")
        self.cfg = cfg
        self.vocab = vocab
        self.batches = batches
        self.model = Model(cfg, vocab.size)
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        store = self.model.store
        self.opt_main = Adam(store, names=self.model.main_names(), lr=cfg.lr,
                             beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
                             group="main")
        self.opt_disc = Adam(store, names=self.model.gan_discriminator_names(),
                             lr=cfg.gan_lr, beta1=cfg.beta1, beta2=cfg.beta2,
                             eps=cfg.adam_eps, group="gan_d")
        self.opt_gen = Adam(store, names=self.model.gan_generator_names(),
                            lr=cfg.gan_lr, beta1=cfg.beta1, beta2=cfg.beta2,
                            eps=cfg.adam_eps, group="gan_g")
        self._step_state = store.state_array("trainer/step")

    @property
    def step_count(self):
        return int(self._step_state)

    # -- single main step ---------------------------------------------------------

    def train_step(self, step):
        batch = self.batches[step % len(self.batches)]
        rng = step_rng(self.cfg.seed, step)
        store = self.model.store
        store.zero_grad()
        t0 = time.perf_counter()
        weights_ok = self._staged_components(step)
        total, comps, dvt = total_loss(self.model, batch, rng,
                                       ae_eps=self.cfg.ae_eps(step),
                                       components=weights_ok)
        if not np.isfinite(total.data):
            raise NumericFailure(f"non-finite loss at step {step}")
        total.backward()
        grad_norm = store.grad_norm(self.opt_main.names)
        if not np.isfinite(grad_norm):
            raise NumericFailure(f"non-finite gradients at step {step}")
        self.opt_main.step()
        store.zero_grad()
        self._update_noise_stats(dvt, batch)
        self._step_state[...] = step + 1
        return MetricsRecord(
            step=step, total=float(total.data),
            components={k: float(v.data) for k, v in comps.items()},
            grad_norm=grad_norm, ae_eps=self.cfg.ae_eps(step),
            wall_time=time.perf_counter() - t0)

    def _staged_components(self, step):
        """Token-first curriculum when --staged: higher levels join halfway."""
        if not self.cfg.staged or step >= self.cfg.steps // 2:
            return None
        names = self.cfg.level_names
        return {"recon/token", "mlm/token", f"coherence/{names[1]}", "ae/token"}

    def _update_noise_stats(self, dvt, batch):
        emb = dvt.token_embedded.data[batch.token_real_mask()]
        self.model.noise.update("token", emb)
        for level, vec in dvt.vectors.items():
            self.model.noise.update(level, vec.data)

    # -- adversarial phase ----------------------------------------------------------

    def adversarial_step(self, level_name, step):
        """One discriminator + generator update; only GAN parameters (plus
        G_PNDB) may move."""
        batch = self.batches[step % len(self.batches)]
        rng = step_rng(self.cfg.seed, step, purpose=1)
        store = self.model.store
        with T.no_grad():
            dvt = self.model.encoder.build_dvt(batch)
            real = dvt.vectors[level_name].data.copy()
            real_answers = None
            if self.model.pndb is not None and level_name == batch.level_names[-1]:
                pooled, _ = _pndb_write(self.model, dvt)
                real_answers = pooled.data.copy()  # one pooled A per document
        bundle = AdversarialBundle(
            cfg=self.cfg, stack=self.model.stack, encoder=self.model.encoder,
            generators=self.model.generators,
            discriminators=self.model.discriminators,
            noise_stats=self.model.noise, pndb=self.model.pndb,
            real_answers=real_answers)
        store.zero_grad()
        d_loss, g_loss = G.adversarial_losses(bundle, level_name, real, rng)
        d_loss.backward()
        self.opt_disc.step()
        store.zero_grad()
        g_loss.backward()
        self.opt_gen.step()
        store.zero_grad()
        return float(d_loss.data), float(g_loss.data)

    def generator_only_step(self, level_name, step):
        """Generator trained against the frozen Coherence Checker."""
        rng = step_rng(self.cfg.seed, step, purpose=2)
        store = self.model.store
        store.zero_grad()
        bundle = AdversarialBundle(
            cfg=self.cfg, stack=self.model.stack, encoder=self.model.encoder,
            generators=self.model.generators,
            discriminators=self.model.discriminators,
            noise_stats=self.model.noise)
        g_loss = G.generator_only_loss(bundle, self.model.checkers, level_name,
                                       rng, n=self.cfg.batch_size)
        g_loss.backward()
        self.opt_gen.step()
        store.zero_grad()
        return float(g_loss.data)

    # -- full runs --------------------------------------------------------------------

    def train(self, metrics_path=None, checkpoint_path=None):
        metrics = MetricsWriter(metrics_path)
        ckpt = Path(checkpoint_path) if checkpoint_path else (
            self.out_dir / "model.ckpt" if self.out_dir else None)
        last_good = None
        start = self.step_count
        try:
            for step in range(start, self.cfg.steps):
                try:
                    record = self.train_step(step)
                except NumericFailure:
                    log.error("aborting at step %d; last good checkpoint: %s",
                              step, last_good)
                    raise
                metrics.append(record)
                if ckpt and ((step + 1) % self.cfg.checkpoint_every == 0
                             or step + 1 == self.cfg.steps):
                    try:
                        self.model.store.check_finite()
                    except FloatingPointError as e:
                        log.error("aborting at step %d; last good checkpoint: %s",
                                  step, last_good)
                        raise NumericFailure(str(e)) from e
                    checkpoint.save(self.model.store, ckpt)
                    last_good = ckpt
            if self.cfg.gan_mode == "post" and self.cfg.gan_steps > 0:
                for g_step in range(self.cfg.gan_steps):
                    for level in self.cfg.level_names[1:]:
                        self.adversarial_step(level, self.cfg.steps + g_step)
            elif self.cfg.gan_mode == "cc" and self.cfg.gan_steps > 0:
                for g_step in range(self.cfg.gan_steps):
                    for level in self.cfg.level_names[1:]:
                        self.generator_only_step(level, self.cfg.steps + g_step)
            if ckpt:
                checkpoint.save(self.model.store, ckpt)
        finally:
            metrics.close()
        return ckpt

    def resume(self, ckpt_path):
        checkpoint.load_into(self.model.store, ckpt_path)
        return self.step_count

    def evaluate(self, batches=None, seed_offset=10_000):
        """Frozen-parameter loss report (means over batches)."""
        batches = batches if batches is not None else self.batches
        sums, counts = {}, {}
        with T.no_grad():
            for i, batch in enumerate(batches):
                rng = step_rng(self.cfg.seed, seed_offset + i)
                total, comps, _ = total_loss(self.model, batch, rng,
                                             ae_eps=self.cfg.ae_eps(self.step_count))
                for k, v in {"total": total, **comps}.items():
                    sums[k] = sums.get(k, 0.0) + float(v.data)
                    counts[k] = counts.get(k, 0) + 1
        return {k: sums[k] / counts[k] for k in sums}


# -- gradient-check report ------------------------------------------------------------------


def component_list(cfg):
    """Enabled components only: weight-0 families/levels and a zeroed AE
    schedule drop out of reports."""
    names = cfg.level_names
    comps = [("recon", "token")]
    comps += [("recon", c) for c in names[1:-1]]
    comps += [("mlm", "token")] + [("mlm", c) for c in names[1:-1]]
    comps += [("coherence", p) for p in names[1:]]
    out = [f"{fam}/{lv}" for fam, lv in comps if cfg.weight(fam, lv) > 0]
    if cfg.ae_eps0 > 0:
        out += [f"ae/{c}" for c in names[:-1]]
    return out


def check_gradients(model, batch, h=1e-5, tol=1e-4, coords=3, seed=7,
                    include_gan=True, only=None):
    """Finite-difference verification of every enabled loss component.

    Each closure reseeds its own corruption stream, so repeated evaluations
    under perturbation replay identical plans.  ``only`` restricts the
    component set.  Returns {component: report}.
    """
    reports = {}
    wanted = (lambda name: only is None or name in only)

    def closure(component, cache):
        def f():
            rng = np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(component.encode()))))
            total, comps, _ = total_loss(model, batch, rng, ae_eps=0.05,
                                         components={component}, label_cache=cache)
            if component not in comps:
                raise ValueError(f"component {component} produced no loss")
            return comps[component]
        return f

    for comp in component_list(model.cfg):
        if not wanted(comp):
            continue
        reports[comp] = grad_check(closure(comp, {}), model.store, h=h,
                                   max_coords_per_param=coords,
                                   rng=np.random.default_rng(seed))

    total_cache = {}

    def total_closure():
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x70)))
        total, _, _ = total_loss(model, batch, rng, ae_eps=0.05,
                                 label_cache=total_cache)
        return total

    if wanted("total"):
        reports["total"] = grad_check(total_closure, model.store, h=h,
                                      max_coords_per_param=coords,
                                      rng=np.random.default_rng(seed + 1))

    if include_gan and (only is None or any(n.startswith("gan/") for n in only)):
        with T.no_grad():
            dvt = model.encoder.build_dvt(batch)
            top = model.cfg.level_names[-1]
            real = dvt.vectors[top].data.copy()
            real_answers = None
            if model.pndb is not None:
                pooled, _ = _pndb_write(model, dvt)
                real_answers = pooled.data.copy()
            for lv in model.cfg.level_names[1:]:
                model.noise.update(lv, dvt.vectors[lv].data)
            model.noise.update("token", dvt.token_embedded.data[batch.token_real_mask()])
        bundle = AdversarialBundle(
            cfg=model.cfg, stack=model.stack, encoder=model.encoder,
            generators=model.generators, discriminators=model.discriminators,
            noise_stats=model.noise, pndb=model.pndb, real_answers=real_answers)

        def gan_closure(idx, cache):
            def f():
                rng = np.random.default_rng(np.random.SeedSequence((seed, 0x6A)))
                d_loss, g_loss = G.adversarial_losses(bundle, top, real, rng,
                                                      label_cache=cache)
                return (d_loss, g_loss)[idx]
            return f

        if wanted("gan/d"):
            reports["gan/d"] = grad_check(gan_closure(0, {}), model.store, h=h,
                                          max_coords_per_param=coords,
                                          rng=np.random.default_rng(seed + 2))
        if wanted("gan/g"):
            reports["gan/g"] = grad_check(gan_closure(1, {}), model.store, h=h,
                                          max_coords_per_param=coords,
                                          rng=np.random.default_rng(seed + 3))

        def cc_closure():
            rng = np.random.default_rng(np.random.SeedSequence((seed, 0x6B)))
            return G.generator_only_loss(bundle, model.checkers,
                                         model.cfg.level_names[1], rng, n=2)

        if wanted("gan/g_cc"):
            reports["gan/g_cc"] = grad_check(cc_closure, model.store, h=h,
                                             max_coords_per_param=coords,
                                             rng=np.random.default_rng(seed + 4))
    return reports
