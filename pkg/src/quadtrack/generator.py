"""Command-conditioned latent motion generator with a Gaussian prior.

Three MLPs share one latent space of size ``d``:

    encoder  E: motion window (M x F, normalized)      -> (mu_q, logvar_q)
    decoder  D: z (+) command embedding                 -> motion window
    prior    p: command embedding (+) anchor features   -> (mu_p, logvar_p)

F = 23 per-frame features in clip order (root_pos, root_quat, q, contacts).
Windows are stored relative to the first frame's horizontal root position
and normalized per feature.  Log-variances are clamped to [-8, 4] with zero
gradient outside the clamp.

The score-function update treats each sampled z as fixed, so its gradient
reaches the prior only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import AnnotationTriple, MotionClip
from .kinematics import Morphology, quat_to_matrix
from .nets import LOG2PI, AdamState, MlpNet, adam_step, load_checkpoint, save_checkpoint

FRAME_FEATURES = 23
STATE_FEATURES = 28  # root height, projected gravity, q, qd
LOGVAR_MIN, LOGVAR_MAX = -8.0, 4.0


class GeneratorError(ValueError):
    pass


class CommandVocab:
    """Ordered command ids with display text and a fixed embedding table."""

    def __init__(self, ids, texts, table: np.ndarray):
        ids = list(ids)
        if len(set(ids)) != len(ids):
            raise GeneratorError("command ids must be unique")
        if not ids:
            raise GeneratorError("command vocabulary is empty")
        table = np.asarray(table, dtype=float)
        if table.ndim != 2 or table.shape[0] != len(ids):
            raise GeneratorError("embedding table must have one row per command")
        self.ids = ids
        self.texts = list(texts)
        self.table = table
        self._index = {k: i for i, k in enumerate(ids)}

    @classmethod
    def from_entries(cls, entries, dim: int, seed: int = 0) -> "CommandVocab":
        """Embeddings are unit-norm Gaussian rows drawn from ``seed``."""
        ids = [e["id"] for e in entries]
        texts = [e.get("text", e["id"]) for e in entries]
        rng = np.random.default_rng(seed)
        t = rng.standard_normal((len(ids), dim))
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        return cls(ids, texts, t)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, cid: str) -> int:
        try:
            return self._index[cid]
        except KeyError:
            raise GeneratorError(f"unknown command id {cid!r}") from None

    def embed(self, cid: str) -> np.ndarray:
        return self.table[self.index(cid)]

    def text(self, cid: str) -> str:
        return self.texts[self.index(cid)]

    def lookup(self, clip: MotionClip) -> str:
        """Command id for a clip: action label or command text matching the vocabulary."""
        a = clip.annotations
        if a.action_label in self._index:
            return a.action_label
        for cid, text in zip(self.ids, self.texts):
            if a.command == text or a.command == cid:
                return cid
        raise GeneratorError(f"clip {clip.id!r}: no vocabulary command matches its annotations")


def state_features(root_pos, root_quat, q, qd) -> np.ndarray:
    """Anchor-state features (root height, projected gravity, q, qd); batched over rows."""
    root_pos = np.atleast_2d(root_pos)
    R = quat_to_matrix(np.atleast_2d(root_quat))
    return np.concatenate([root_pos[:, 2:3], -R[:, 2, :], np.atleast_2d(q), np.atleast_2d(qd)], axis=1)


def clip_frames(clip: MotionClip) -> np.ndarray:
    return np.concatenate([clip.root_pos, clip.root_quat, clip.q, clip.contacts.astype(float)], axis=1)


def _split_gauss(out: np.ndarray):
    d = out.shape[1] // 2
    raw = out[:, d:]
    return out[:, :d], np.clip(raw, LOGVAR_MIN, LOGVAR_MAX), ((raw >= LOGVAR_MIN) & (raw <= LOGVAR_MAX)).astype(float)


def diag_gauss_logpdf(z, mu, logvar) -> np.ndarray:
    return np.sum(-0.5 * (z - mu) ** 2 * np.exp(-logvar) - 0.5 * logvar - 0.5 * LOG2PI, axis=-1)


@dataclass
class GenSample:
    z: np.ndarray
    log_prior: float
    motion: np.ndarray  # (M, F) decoded, joint angles clamped, quaternion normalized
    command: str
    anchor: np.ndarray

    def to_clip(self, clip_id: str, vocab: CommandVocab | None = None) -> MotionClip:
        m = self.motion
        text = vocab.text(self.command) if vocab is not None else self.command
        return MotionClip(clip_id, m[:, 0:3], m[:, 3:7], m[:, 7:19], m[:, 19:23] > 0.5,
                          AnnotationTriple(self.command, "generated", text), "generated",
                          flags=("synthetic",))


@dataclass
class GenConfig:
    latent_dim: int = 16
    window: int = 50
    enc_hidden: tuple = (256, 128)
    dec_hidden: tuple = (128, 256)
    prior_hidden: tuple = (64, 64)
    activation: str = "elu"
    beta: float = 0.01
    lr: float = 1e-4
    pretrain_lr: float = 2e-4
    pretrain_epochs: int = 20
    batch_size: int = 32
    stride: int = 10


class GenLatentModel:
    def __init__(self, encoder: MlpNet, decoder: MlpNet, prior: MlpNet, window: int, latent_dim: int,
                 cond_dim: int, morph: Morphology, feat_mean=None, feat_std=None, lr: float = 1e-4):
        self.encoder, self.decoder, self.prior = encoder, decoder, prior
        self.M, self.d, self.cond_dim = int(window), int(latent_dim), int(cond_dim)
        self.morph = morph
        D = self.M * FRAME_FEATURES
        if encoder.layer_dims[0] != D or encoder.layer_dims[-1] != 2 * self.d:
            raise GeneratorError("encoder must map M x F features to 2 x latent_dim")
        if decoder.layer_dims[0] != self.d + cond_dim or decoder.layer_dims[-1] != D:
            raise GeneratorError("decoder must map latent + condition to M x F features")
        if prior.layer_dims[0] != cond_dim + STATE_FEATURES or prior.layer_dims[-1] != 2 * self.d:
            raise GeneratorError("prior must map condition + anchor features to 2 x latent_dim")
        self.feat_mean = np.zeros(FRAME_FEATURES) if feat_mean is None else np.asarray(feat_mean, dtype=float)
        self.feat_std = np.ones(FRAME_FEATURES) if feat_std is None else np.asarray(feat_std, dtype=float)
        self.opts = {k: AdamState.for_params(getattr(self, k).param_count, lr) for k in ("encoder", "decoder", "prior")}

    @classmethod
    def create(cls, cfg: GenConfig, cond_dim: int, morph: Morphology, rng: np.random.Generator) -> "GenLatentModel":
        D = cfg.window * FRAME_FEATURES
        d = cfg.latent_dim
        enc = MlpNet.init([D, *cfg.enc_hidden, 2 * d], cfg.activation, rng, out_scale=0.1)
        dec = MlpNet.init([d + cond_dim, *cfg.dec_hidden, D], cfg.activation, rng)
        pri = MlpNet.init([cond_dim + STATE_FEATURES, *cfg.prior_hidden, 2 * d], cfg.activation, rng, out_scale=0.0)
        return cls(enc, dec, pri, cfg.window, d, cond_dim, morph, lr=cfg.lr)

    def set_lr(self, lr: float):
        for opt in self.opts.values():
            opt.lr = lr

    # -- normalization -------------------------------------------------------

    def normalize_window(self, frames: np.ndarray) -> np.ndarray:
        """(B, M, F) raw frames -> (B, M*F) normalized, root xy relative to frame 0."""
        f = np.array(frames, dtype=float)
        f[:, :, 0:2] -= f[:, :1, 0:2]
        return ((f - self.feat_mean) / self.feat_std).reshape(len(f), -1)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(len(x), self.M, FRAME_FEATURES) * self.feat_std + self.feat_mean

    # -- networks ------------------------------------------------------------

    def prior_params(self, cond: np.ndarray, anchor: np.ndarray):
        out = self.prior(np.concatenate([np.atleast_2d(cond), np.atleast_2d(anchor)], axis=1))
        mu, lv, _ = _split_gauss(out)
        return mu, lv

    def log_prior(self, z, cond, anchor) -> np.ndarray:
        mu, lv = self.prior_params(cond, anchor)
        return diag_gauss_logpdf(np.atleast_2d(z), mu, lv)

    def decode(self, z: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """Decoded frames (B, M, F) with joint limits, unit quaternions and 0/1 contacts enforced."""
        z = np.atleast_2d(z)
        cond = np.broadcast_to(np.atleast_2d(cond), (len(z), self.cond_dim))
        raw = self.denormalize(self.decoder(np.concatenate([z, cond], axis=1)))
        return self.finalize(raw)

    def finalize(self, raw: np.ndarray) -> np.ndarray:
        out = raw.copy()
        qn = np.linalg.norm(out[..., 3:7], axis=-1, keepdims=True)
        out[..., 3:7] = np.where(qn > 1e-9, out[..., 3:7] / np.where(qn > 1e-9, qn, 1.0), np.array([1.0, 0, 0, 0]))
        out[..., 7:19] = np.clip(out[..., 7:19], self.morph.lower, self.morph.upper)
        out[..., 19:23] = (out[..., 19:23] > 0.5).astype(float)
        return out

    def save(self, path):
        save_checkpoint(path, {
            "encoder": (self.encoder, self.opts["encoder"]),
            "decoder": (self.decoder, self.opts["decoder"]),
            "prior": (self.prior, self.opts["prior"]),
            "meta": np.array([self.M, self.d, self.cond_dim], dtype=float),
            "feat_mean": self.feat_mean,
            "feat_std": self.feat_std,
        })

    @classmethod
    def load(cls, path, morph: Morphology) -> "GenLatentModel":
        d = load_checkpoint(path)
        M, latent, cond = (int(x) for x in d["meta"][0])
        model = cls(d["encoder"][0], d["decoder"][0], d["prior"][0], M, latent, cond, morph,
                    d["feat_mean"][0], d["feat_std"][0])
        for k in model.opts:
            if d[k][1] is not None:
                model.opts[k] = d[k][1]
        return model


def sample(model: GenLatentModel, vocab: CommandVocab, command: str, anchor, rng: np.random.Generator) -> GenSample:
    """Reparameterized draw z = mu + sigma * eps from the prior, then deterministic decoding."""
    cond = vocab.embed(command)
    anchor = np.asarray(anchor, dtype=float).reshape(1, STATE_FEATURES)
    mu, lv = model.prior_params(cond, anchor)
    eps = rng.standard_normal(model.d)
    z = mu[0] + np.exp(0.5 * lv[0]) * eps
    lp = float(diag_gauss_logpdf(z[None], mu, lv)[0])
    return GenSample(z, lp, model.decode(z, cond)[0], command, anchor[0])


def sample_batch(model: GenLatentModel, vocab: CommandVocab, commands, anchor, rng) -> list[GenSample]:
    return [sample(model, vocab, c, anchor, rng) for c in commands]


# -- reconstruction loss ---------------------------------------------------------

def recon_loss(model: GenLatentModel, x: np.ndarray, cond: np.ndarray, anchor: np.ndarray, beta: float,
               eps: np.ndarray | None = None, rng: np.random.Generator | None = None, with_grads: bool = True):
    """ELBO-style loss on normalized windows ``x`` (B, M*F).

    loss = mean_b[ mean_k (x_hat - x)^2 ] + beta * mean_b KL(q(z|x) || p(z|c, s)).
    ``eps`` fixes the reparameterization noise (zeros: z = mu_q).
    Returns (loss, recon, kl, grads dict or None).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    B = len(x)
    cond = np.broadcast_to(np.atleast_2d(cond), (B, model.cond_dim))
    anchor = np.broadcast_to(np.atleast_2d(anchor), (B, STATE_FEATURES))
    if x.shape[1] != model.M * FRAME_FEATURES:
        raise GeneratorError(f"window needs {model.M} frames")
    if eps is None:
        if rng is None:
            raise GeneratorError("recon_loss needs eps or an rng")
        eps = rng.standard_normal((B, model.d))
    eo, tape_e = model.encoder.forward(x)
    mq, lq, mask_q = _split_gauss(eo)
    sq = np.exp(0.5 * lq)
    z = mq + sq * eps
    xh, tape_d = model.decoder.forward(np.concatenate([z, cond], axis=1))
    po, tape_p = model.prior.forward(np.concatenate([cond, anchor], axis=1))
    mp, lp, mask_p = _split_gauss(po)
    diff = xh - x
    K = x.shape[1]
    recon = float(np.sum(diff * diff) / (B * K))
    ivp = np.exp(-lp)
    kl_b = 0.5 * np.sum(lp - lq + (np.exp(lq) + (mq - mp) ** 2) * ivp - 1.0, axis=1)
    kl = float(kl_b.mean())
    loss = recon + beta * kl
    if not with_grads:
        return loss, recon, kl, None
    g_xh = 2.0 * diff / (B * K)
    g_dec, g_din = model.decoder.backward(tape_d, g_xh)
    g_z = g_din[:, :model.d]
    bk = beta / B
    g_mq = g_z + bk * (mq - mp) * ivp
    g_lq = g_z * eps * 0.5 * sq + bk * 0.5 * (np.exp(lq) * ivp - 1.0)
    g_mp = -bk * (mq - mp) * ivp
    g_lp = bk * 0.5 * (1.0 - (np.exp(lq) + (mq - mp) ** 2) * ivp)
    g_enc, _ = model.encoder.backward(tape_e, np.concatenate([g_mq, g_lq * mask_q], axis=1))
    g_pri, _ = model.prior.backward(tape_p, np.concatenate([g_mp, g_lp * mask_p], axis=1))
    return loss, recon, kl, {"encoder": g_enc, "decoder": g_dec, "prior": g_pri}


# -- executability feedback --------------------------------------------------

def rl_loss(model: GenLatentModel, vocab: CommandVocab, samples: list[GenSample], advantages):
    """L_RL = -mean_i log p(z_i | c_i, s_i) * A_i and its gradient w.r.t. the prior parameters."""
    adv = np.asarray(advantages, dtype=float).reshape(-1)
    if len(adv) != len(samples):
        raise GeneratorError(f"{len(samples)} samples but {len(adv)} advantages")
    if not samples:
        raise GeneratorError("rl_loss needs at least one sample")
    cond = np.stack([vocab.embed(s.command) for s in samples])
    anchor = np.stack([s.anchor for s in samples])
    z = np.stack([s.z for s in samples])
    out, tape = model.prior.forward(np.concatenate([cond, anchor], axis=1))
    mu, lv, mask = _split_gauss(out)
    logp = diag_gauss_logpdf(z, mu, lv)
    n = len(samples)
    loss = -float(np.mean(logp * adv))
    w = -(adv / n)[:, None]  # dL/dlogp
    iv = np.exp(-lv)
    g_mu = w * (z - mu) * iv
    g_lv = w * 0.5 * ((z - mu) ** 2 * iv - 1.0) * mask
    g, _ = model.prior.backward(tape, np.concatenate([g_mu, g_lv], axis=1))
    return loss, g


def rl_update(model: GenLatentModel, vocab: CommandVocab, samples: list[GenSample], advantages,
              recon_batch=None, beta: float = 0.01, rng: np.random.Generator | None = None) -> dict:
    """One generator step on L_R = L_recon + L_RL.

    The RL gradient reaches the prior only.  ``recon_batch`` is an optional
    (x, cond, anchor) triple; without it the step is the RL term alone.
    """
    l_rl, g_rl = rl_loss(model, vocab, samples, advantages)
    grads = {"prior": g_rl}
    l_rec = 0.0
    if recon_batch is not None:
        x, cond, anchor = recon_batch
        l_rec, _, _, g = recon_loss(model, x, cond, anchor, beta, rng=rng)
        grads = {k: g[k] + (g_rl if k == "prior" else 0.0) for k in g}
    for k, gk in grads.items():
        net = getattr(model, k)
        net.params = adam_step(model.opts[k], net.params, gk)
    return {"l_rl": l_rl, "l_recon": float(l_rec), "mean_advantage": float(np.mean(advantages))}


# -- pretraining ---------------------------------------------------------------

def make_windows(model: GenLatentModel, vocab: CommandVocab, clips, stride: int):
    """Normalized windows, condition embeddings and anchor features from clips >= M frames."""
    xs, cs, ss = [], [], []
    for clip in clips:
        if clip.n_frames < model.M:
            continue
        frames = clip_frames(clip)
        qd = np.zeros_like(clip.q)
        if clip.n_frames > 1:
            qd[1:] = np.diff(clip.q, axis=0) * clip.fps
        emb = vocab.embed(vocab.lookup(clip))
        for s in range(0, clip.n_frames - model.M + 1, max(1, stride)):
            xs.append(frames[s:s + model.M])
            cs.append(emb)
            ss.append(state_features(clip.root_pos[s], clip.root_quat[s], clip.q[s], qd[s])[0])
    if not xs:
        raise GeneratorError(f"no clip has the {model.M} frames needed for a window")
    return np.array(xs), np.array(cs), np.array(ss)


def fit_normalization(model: GenLatentModel, raw_windows: np.ndarray):
    f = np.array(raw_windows, dtype=float)
    f[:, :, 0:2] -= f[:, :1, 0:2]
    flat = f.reshape(-1, FRAME_FEATURES)
    model.feat_mean = flat.mean(axis=0)
    model.feat_std = np.maximum(flat.std(axis=0), 1e-3)


def pretrain(model: GenLatentModel, vocab: CommandVocab, clips, epochs: int, rng: np.random.Generator,
             lr: float = 2e-4, beta: float = 0.01, batch_size: int = 32, stride: int = 10, fit_norm: bool = True):
    """Minibatch ELBO minimization; returns per-epoch mean (loss, recon) lists."""
    if not clips:
        raise GeneratorError("pretraining needs a non-empty dataset")
    raw, cond, anchor = make_windows(model, vocab, clips, stride)
    if fit_norm:
        fit_normalization(model, raw)
    x = model.normalize_window(raw)
    model.set_lr(lr)
    losses, recons = [], []
    n = len(x)
    for _ in range(epochs):
        perm = rng.permutation(n)
        ep_l, ep_r = [], []
        for k in range(0, n, batch_size):
            idx = perm[k:k + batch_size]
            loss, rec, _, g = recon_loss(model, x[idx], cond[idx], anchor[idx], beta, rng=rng)
            for name, gk in g.items():
                net = getattr(model, name)
                net.params = adam_step(model.opts[name], net.params, gk)
            ep_l.append(loss * len(idx))
            ep_r.append(rec * len(idx))
        losses.append(float(np.sum(ep_l) / n))
        recons.append(float(np.sum(ep_r) / n))
    return losses, recons
