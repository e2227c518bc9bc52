"""scikit-learn style estimators for the two training phases.

``CsiPretrainer`` is a transformer: ``fit`` runs self-supervised pre-training
on raw CSI and ``transform`` returns mean-pooled encoder embeddings.
``PoseRegressor`` freezes a pretrainer's encoder and fits the pose decoder::

    pre = CsiPretrainer(d=32, epochs=2, batch_size=8).fit(csi, groups=seq_ids)
    reg = PoseRegressor(encoder=pre, skeleton="mmfi17").fit(csi, poses)
    reg.predict(csi).shape  # (N, 17, 3)
"""

from __future__ import annotations

import copy
import math

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin

from .checkpoint import rng_state_to_json
from .csi_data import make_rng, reshape_to_image
from .errors import ConfigError, NumericError
from .masking import MaskStrategy, sample_mask
from .metrics import joint_errors
from .pose_decoder import PoseDecoder, SkeletonGraph, loss_pose, skeleton_registry
from .pretrain import EncoderConfig, LossConfig, MaskedCsiAutoencoder, make_contrastive_batch, pixel_mask
from .training import TrainConfig, lr_at, make_optimizer, seeded_torch, set_lr, single_threaded
from .validation import check_csi, check_groups, check_is_fitted, check_poses

_ENCODER_KEYS = ("d", "heads", "ffn_dim", "depth", "decoder_depth", "decoder_d", "decoder_heads",
                 "patch_height", "patch_width", "proj_dim")
_EMBED_BATCH = 256


class _SequenceIndex:
    def __init__(self, sequence_ids, frame_index):
        self.sequence_ids = sequence_ids
        self.frame_index = frame_index


class CsiPretrainer(BaseEstimator, TransformerMixin):
    """Masked reconstruction + adjacent-frame InfoNCE + uniformity pre-training."""

    def __init__(self, d=64, heads=4, ffn_dim=256, depth=4, decoder_depth=2, decoder_d=64, decoder_heads=4,
                 patch_height=4, patch_width=4, proj_dim=None, mask_strategy="unstructured", mask_ratio=0.8,
                 tau=0.1, lambda_cl=1.0, lambda_unif=0.5, recon_scope="all", epochs=400,
                 steps_per_epoch=None, batch_size=256, lr=1.5e-4, weight_decay=0.05, warmup_epochs=40,
                 schedule="cosine", grad_clip=None, seed=0, deterministic=True, verbose=False):
        self.d = d
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.depth = depth
        self.decoder_depth = decoder_depth
        self.decoder_d = decoder_d
        self.decoder_heads = decoder_heads
        self.patch_height = patch_height
        self.patch_width = patch_width
        self.proj_dim = proj_dim
        self.mask_strategy = mask_strategy
        self.mask_ratio = mask_ratio
        self.tau = tau
        self.lambda_cl = lambda_cl
        self.lambda_unif = lambda_unif
        self.recon_scope = recon_scope
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.schedule = schedule
        self.grad_clip = grad_clip
        self.seed = seed
        self.deterministic = deterministic
        self.verbose = verbose

    # -- configuration views ----------------------------------------------

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**{k: getattr(self, k) for k in _ENCODER_KEYS})

    def loss_config(self) -> LossConfig:
        cfg = LossConfig(tau=self.tau, lambda_cl=self.lambda_cl, lambda_unif=self.lambda_unif,
                         recon_scope=self.recon_scope, mask_strategy=self.mask_strategy,
                         mask_ratio=self.mask_ratio)
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig.defaults(
            "pretrain", epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, warmup_epochs=self.warmup_epochs, schedule=self.schedule,
            seed=self.seed, steps_per_epoch=self.steps_per_epoch, grad_clip=self.grad_clip,
            deterministic=self.deterministic,
        )

    # -- fitting -------------------------------------------------------------

    def init_model(self, csi_shape, input_mean=0.0, input_std=1.0):
        """Build a freshly initialised (untrained) model for CSI samples of ``csi_shape``."""
        E, R, A, S, T = csi_shape
        with seeded_torch(self.seed):
            self.model_ = MaskedCsiAutoencoder((A, E * R * S, T), self.encoder_config())
        self.csi_shape_ = tuple(int(v) for v in csi_shape)
        self.input_mean_ = float(input_mean)
        self.input_std_ = float(input_std)
        self.n_steps_ = 0
        self.history_ = []
        return self

    def _images(self, X) -> torch.Tensor:
        img = reshape_to_image(X)
        return torch.as_tensor((img - self.input_mean_) / self.input_std_, dtype=torch.float32)

    def fit(self, X, y=None, groups=None, frame_index=None, callback=None):
        """Pre-train on CSI ``X`` of shape (N, E, R, A, S, T).

        ``groups`` holds each sample's sequence id; adjacent frames of one
        sequence supply the contrastive positive pair.  ``callback(epoch_row)``
        is called after every epoch.
        """
        X = check_csi(X)
        groups, frame_index = check_groups(groups, len(X), frame_index)
        train_cfg = self.train_config()
        loss_cfg = self.loss_config()
        std = float(X.std()) or 1.0
        self.init_model(X.shape[1:], float(X.mean()), std)
        model = self.model_
        rows, cols = model.grid
        strategy = MaskStrategy.parse(loss_cfg.mask_strategy)
        index = _SequenceIndex(groups, frame_index)
        rng = make_rng(self.seed)
        B = train_cfg.batch_size
        if B > len(X):
            raise ConfigError(f"batch size {B} exceeds the {len(X)} available samples")
        spe = train_cfg.steps_per_epoch or math.ceil(len(X) / B)

        with single_threaded(train_cfg.deterministic):
            imgs = self._images(X)
            opt = make_optimizer(model.parameters(), train_cfg)
            model.train()
            for epoch in range(train_cfg.epochs):
                sums = dict.fromkeys(("l_mask", "l_cl", "l_unif", "total"), 0.0)
                for it in range(spe):
                    set_lr(opt, lr_at(epoch + it / spe, train_cfg.lr, train_cfg.warmup_epochs,
                                      train_cfg.epochs, train_cfg.schedule))
                    batch = make_contrastive_batch(index, B, rng)
                    masks = [sample_mask(rows, cols, strategy, loss_cfg.mask_ratio, rng) for _ in range(B)]
                    out = model.losses(imgs[batch.indices], masks, loss_cfg)
                    if not torch.isfinite(out["total"]):
                        raise NumericError(
                            f"non-finite pre-training loss at epoch {epoch}, batch {it} "
                            f"(global batch index {self.n_steps_})"
                        )
                    opt.zero_grad()
                    out["total"].backward()
                    if train_cfg.grad_clip:
                        torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
                    opt.step()
                    self.n_steps_ += 1
                    for k in sums:
                        sums[k] += float(out[k].detach())
                row = {"epoch": epoch, **{k: v / spe for k, v in sums.items()}}
                self.history_.append(row)
                if self.verbose:
                    print(f"epoch {epoch}: " + " ".join(f"{k}={v:.5f}" for k, v in row.items() if k != "epoch"))
                if callback is not None:
                    callback(row)
            model.eval()
        self.rng_state_ = rng_state_to_json(rng)
        return self

    # -- inference -------------------------------------------------------------

    def latents(self, X) -> np.ndarray:
        """Encoder latents of every patch, (N, n, d)."""
        check_is_fitted(self, "model_")
        X = check_csi(X, self.csi_shape_)
        out = []
        with single_threaded(self.deterministic):
            self.model_.eval()
            for start in range(0, len(X), _EMBED_BATCH):
                out.append(self.model_.embed_full(self._images(X[start:start + _EMBED_BATCH])).numpy())
        return np.concatenate(out)

    def transform(self, X) -> np.ndarray:
        """Mean-pooled encoder embeddings e_i, (N, d)."""
        return self.latents(X).mean(axis=1)

    def reconstruct(self, X, rng=None) -> tuple[np.ndarray, np.ndarray]:
        """Masked reconstruction of each sample: returns (reconstruction, masked pixel map) in input units."""
        check_is_fitted(self, "model_")
        X = check_csi(X, self.csi_shape_)
        rng = rng if rng is not None else make_rng(self.seed)
        model = self.model_
        masks = [sample_mask(*model.grid, self.mask_strategy, self.mask_ratio, rng) for _ in range(len(X))]
        with torch.no_grad():
            imgs = self._images(X)
            vis = torch.as_tensor(np.stack([m.visible for m in masks]))
            msk = torch.as_tensor(np.stack([m.masked for m in masks]))
            tokens = model.embed(imgs)
            lat = model.encode(torch.gather(tokens, 1, vis[..., None].expand(-1, -1, tokens.shape[-1])))
            rec = model.decode(lat, vis, msk).numpy() * self.input_std_ + self.input_mean_
        pix = pixel_mask(msk.numpy(), *model.grid, model.image_shape[0], self.patch_height, self.patch_width)
        return rec, pix


class PoseRegressor(BaseEstimator, RegressorMixin):
    """Pose decoder on top of a frozen CSI encoder.

    ``encoder`` is a fitted :class:`CsiPretrainer`, or an unfitted one / None
    for a randomly initialised ("from scratch") frozen encoder.
    """

    def __init__(self, encoder=None, skeleton="mmfi17", gcn_layers=1, attn_layers=1, ffn_dim=None,
                 head_hidden=None, use_prompt=True, optimizer="adamw", epochs=50, steps_per_epoch=None,
                 batch_size=32, lr=1e-3, weight_decay=0.01, momentum=0.9, grad_clip=None, seed=0,
                 deterministic=True, verbose=False):
        self.encoder = encoder
        self.skeleton = skeleton
        self.gcn_layers = gcn_layers
        self.attn_layers = attn_layers
        self.ffn_dim = ffn_dim
        self.head_hidden = head_hidden
        self.use_prompt = use_prompt
        self.optimizer = optimizer
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.seed = seed
        self.deterministic = deterministic
        self.verbose = verbose

    def train_config(self) -> TrainConfig:
        return TrainConfig.defaults(
            "decode", optimizer=self.optimizer, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, momentum=self.momentum, seed=self.seed,
            steps_per_epoch=self.steps_per_epoch, grad_clip=self.grad_clip, deterministic=self.deterministic,
        )

    def _graph(self) -> SkeletonGraph:
        return self.skeleton if isinstance(self.skeleton, SkeletonGraph) else skeleton_registry(self.skeleton)

    def _frozen_encoder(self, csi_shape, X) -> CsiPretrainer:
        enc = self.encoder
        if enc is not None and hasattr(enc, "model_"):
            enc = copy.deepcopy(enc)
        else:
            enc = copy.deepcopy(enc) if enc is not None else CsiPretrainer(seed=self.seed)
            enc.init_model(csi_shape, float(X.mean()), float(X.std()) or 1.0)
        for p in enc.model_.parameters():
            p.requires_grad_(False)
        enc.model_.eval()
        return enc

    def init_model(self, encoder: CsiPretrainer, C: int):
        graph = self._graph()
        self.graph_ = graph
        self.encoder_ = encoder
        with seeded_torch(self.seed):
            self.decoder_ = PoseDecoder(graph, encoder.model_.config.d, C, self.gcn_layers, self.attn_layers,
                                        self.ffn_dim, head_hidden=self.head_hidden, use_prompt=self.use_prompt)
        self.n_steps_ = 0
        self.history_ = []
        return self

    def fit(self, X, Y, X_val=None, Y_val=None, callback=None):
        X = check_csi(X)
        graph = self._graph()
        Y = check_poses(Y, len(X), graph.J)
        train_cfg = self.train_config()
        self.init_model(self._frozen_encoder(X.shape[1:], X), Y.shape[2])
        dec = self.decoder_
        with torch.no_grad():
            mean = Y.mean(axis=0)
            dec.pose_mean.copy_(torch.as_tensor(mean))
            dec.pose_scale.fill_(float((Y - mean).std()) or 1.0)

        feats = torch.as_tensor(self.encoder_.transform(X))
        with torch.no_grad():
            dec.feat_mean.copy_(feats.mean(dim=0))
            dec.feat_std.copy_(feats.std(dim=0, correction=0).clamp_min(1e-6))
        target = dec.normalize(torch.as_tensor(Y))
        val_feats = None
        if X_val is not None:
            val_feats = torch.as_tensor(self.encoder_.transform(check_csi(X_val, X.shape[1:])))
            Y_val = check_poses(Y_val, len(val_feats), graph.J)

        rng = make_rng(self.seed)
        B = min(train_cfg.batch_size, len(X))
        spe = train_cfg.steps_per_epoch or math.ceil(len(X) / B)
        order, pos = rng.permutation(len(X)), 0
        with single_threaded(train_cfg.deterministic):
            opt = make_optimizer(dec.parameters(), train_cfg)
            for epoch in range(train_cfg.epochs):
                dec.train()
                total = 0.0
                for it in range(spe):
                    if pos + B > len(order):
                        order, pos = rng.permutation(len(X)), 0
                    idx = torch.as_tensor(order[pos:pos + B])
                    pos += B
                    loss = loss_pose(dec.forward_pooled(feats[idx]), target[idx])
                    if not torch.isfinite(loss):
                        raise NumericError(f"non-finite pose loss at epoch {epoch}, batch {it}")
                    opt.zero_grad()
                    loss.backward()
                    if train_cfg.grad_clip:
                        torch.nn.utils.clip_grad_norm_(dec.parameters(), train_cfg.grad_clip)
                    opt.step()
                    self.n_steps_ += 1
                    total += float(loss.detach())
                row = {"epoch": epoch, "train_loss": total / spe, "val_mpjpe": float("nan")}
                if val_feats is not None:
                    row["val_mpjpe"] = float(joint_errors(self._predict_feats(val_feats), Y_val).mean())
                self.history_.append(row)
                if self.verbose:
                    print(f"epoch {epoch}: train_loss={row['train_loss']:.5f} val_mpjpe={row['val_mpjpe']:.2f}")
                if callback is not None:
                    callback(row)
        dec.eval()
        self.rng_state_ = rng_state_to_json(rng)
        return self

    def _predict_feats(self, feats: torch.Tensor) -> np.ndarray:
        self.decoder_.eval()
        with torch.no_grad():
            return self.decoder_.denormalize(self.decoder_.forward_pooled(feats)).numpy()

    def predict(self, X) -> np.ndarray:
        """Predicted poses, (N, J, C)."""
        check_is_fitted(self, "decoder_")
        feats = torch.as_tensor(self.encoder_.transform(X))
        with single_threaded(self.deterministic):
            return self._predict_feats(feats)

    def score(self, X, Y, sample_weight=None) -> float:
        """Negative MPJPE (higher is better, as scikit-learn scorers expect)."""
        Y = check_poses(Y, len(check_csi(X)))
        err = joint_errors(self.predict(X), Y).mean(axis=1)
        return -float(np.average(err, weights=sample_weight))
