"""Training orchestration: two augmented views per batch, coarse-label
classification through the chosen head, the hierarchical margin loss
between the views, Adam updates, the feature memory with per-epoch
reclustering, and the momentum target updates. Writes the resolved config,
a per-epoch metrics CSV, and a final checkpoint; all file writes are
atomic.
"""

import dataclasses
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_mod
from . import config as config_mod
from . import data as data_mod
from . import evaluation, geometry, margins, mlr, network, pseudo_labels

METRICS_COLUMNS = ("epoch", "loss_cls", "loss_hcm", "loss_total",
                   "d1", "d2", "coarse_acc", "wall_time_s")


@dataclass
class MetricsRow:
    epoch: int
    loss_cls: float
    loss_hcm: float
    loss_total: float
    d1: float
    d2: float
    coarse_acc: float
    wall_time_s: float

    def to_csv(self):
        return ",".join([
            str(self.epoch),
            repr(self.loss_cls),
            repr(self.loss_hcm),
            repr(self.loss_total),
            repr(self.d1),
            repr(self.d2),
            repr(self.coarse_acc),
            f"{self.wall_time_s:.3f}",
        ])


@dataclass
class TrainResult:
    cfg: object
    store: object
    net: object
    head: object
    targets: object
    metrics: list
    train_set: object
    eval_set: object
    checkpoint_path: str
    metrics_path: str
    config_path: str


def _ensure_finite(name, value, epoch, step):
    if not np.isfinite(value):
        raise RuntimeError(
            f"non-finite {name} ({value}) at epoch {epoch} step {step}; aborting")


def _epoch_lr(cfg, epoch):
    decays = sum(1 for d in cfg.decay_epoch_set() if epoch >= d)
    return cfg.lr * cfg.lr_decay_factor ** decays


def load_datasets(cfg):
    """(train, eval) feature sets for the configured source."""
    if cfg.data:
        train = data_mod.ingest_features(cfg.data)
        return train, train
    return data_mod.generate(cfg.synthetic_spec())


def train(cfg):
    """Run the configured training job and write its artifacts."""
    config_mod.validate(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_path = out / "resolved.cfg"
    _atomic_write_text(config_path, config_mod.resolved_text(cfg))

    train_set, eval_set = load_datasets(cfg)
    seed_seq = np.random.SeedSequence(cfg.seed)
    init_ss, shuffle_ss, augment_ss, cluster_ss, reinit_ss = seed_seq.spawn(5)
    init_rng = np.random.default_rng(init_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    augment_rng = np.random.default_rng(augment_ss)
    cluster_rng = np.random.default_rng(cluster_ss)
    reinit_rng = np.random.default_rng(reinit_ss)

    hyperbolic = cfg.space == "hyperbolic"
    classes = np.unique(train_set.coarse)
    n_coarse = int(classes.max()) + 1
    store = network.ParamStore()
    net, head = network.build_model(
        cfg.space, n_coarse, cfg.encoder_dim_list(train_set.dim),
        cfg.projector_dim_list(), cfg.curvature, store, init_rng)
    targets = margins.TargetDistances(beta=cfg.beta)
    bank = pseudo_labels.MemoryBank(classes, cfg.memory_size) if cfg.hcm else None
    cluster_model = None
    sigma = cfg.resolved_sigma()
    k_clusters = cfg.resolved_k_clusters()
    reinit_epochs = cfg.reinit_epoch_set()

    def recluster_now():
        return pseudo_labels.recluster(
            bank, k_clusters, seed=int(cluster_rng.integers(2 ** 63)),
            n_init=cfg.kmeans_restarts)

    metrics = []
    global_step = 0
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = _epoch_lr(cfg, epoch)
        if cfg.ahcd and epoch in reinit_epochs:
            targets.reinitialize()
        if cfg.hcm and cfg.recluster_every == 0:
            cluster_model = recluster_now()
        perm = shuffle_rng.permutation(train_set.n)
        n_batches = train_set.n // cfg.batch_size
        sums = np.zeros(4)  # loss_cls, loss_hcm, loss_total, coarse_acc
        for b in range(n_batches):
            if cfg.hcm and cfg.recluster_every > 0 and global_step % cfg.recluster_every == 0:
                cluster_model = recluster_now()
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            coarse = train_set.coarse[idx]
            xq, xk = data_mod.augment_pair(train_set.features[idx], sigma, augment_rng)
            _, fq = net.forward(ad.Tensor(xq))
            _, fk = net.forward(ad.Tensor(xk))
            if hyperbolic:
                z = geometry.exp_map(fq, cfg.curvature)
                logits = mlr.mlr_logits(z, head, curvature=cfg.curvature)
            else:
                logits = head.logits(fq)
            loss_cls = mlr.classification_loss(logits, coarse)
            _ensure_finite("loss_cls", loss_cls.item(), epoch, global_step)
            if cfg.hcm:
                if cluster_model is not None:
                    fine = pseudo_labels.assign_pseudo(fk.data, coarse, cluster_model)
                else:
                    fine = np.full(len(idx), -1, dtype=np.int64)
                labels = margins.LabelTriple(train_set.instance_id[idx], fine, coarse)
                w = margins.distance_matrix(fq, fk)
                target_rows = margins.target_matrix(labels, labels, targets)
                loss_hcm = margins.hcm_loss(w, target_rows)
                _ensure_finite("loss_hcm", loss_hcm.item(), epoch, global_step)
                loss = margins.total_loss(loss_cls, loss_hcm, cfg.alpha)
            else:
                loss_hcm = None
                loss = loss_cls
            loss.backward()
            network.adam_step(store, lr, weight_decay=cfg.weight_decay,
                              grad_clip=cfg.grad_clip)
            store.zero_grad()
            if hyperbolic:
                rows = head.degenerate_normals()
                if len(rows):
                    head.resample_normals(rows, reinit_rng)
                    store.reset_moment_rows("mlr.a", rows)
            if cfg.hcm:
                bank.push(fk.data, coarse)
                d1_mean, d2_mean = margins.batch_stratum_means(w.data, labels, labels)
                if cfg.ahcd:
                    targets.momentum_update(d1_mean, d2_mean)
            acc = float((logits.data.argmax(axis=1) == coarse).mean())
            hcm_val = loss_hcm.item() if loss_hcm is not None else float("nan")
            sums += (loss_cls.item(), 0.0 if np.isnan(hcm_val) else hcm_val,
                     loss.item(), acc)
            global_step += 1
        denom = max(n_batches, 1)
        metrics.append(MetricsRow(
            epoch=epoch,
            loss_cls=sums[0] / denom,
            loss_hcm=sums[1] / denom if cfg.hcm else float("nan"),
            loss_total=sums[2] / denom,
            d1=targets.d1,
            d2=targets.d2,
            coarse_acc=sums[3] / denom,
            wall_time_s=time.perf_counter() - started,
        ))

    metrics_path = out / "metrics.csv"
    _atomic_write_text(metrics_path, format_metrics_csv(metrics))
    checkpoint_path = out / "model.ckpt"
    ckpt_mod.save_checkpoint(
        checkpoint_path, store,
        meta={
            "seed": cfg.seed,
            "curvature": cfg.curvature,
            "space": cfg.space,
            "n_coarse": n_coarse,
            "encoder_dims": cfg.encoder_dim_list(train_set.dim),
            "projector_dims": cfg.projector_dim_list(),
        },
        targets=targets)
    return TrainResult(cfg=cfg, store=store, net=net, head=head, targets=targets,
                       metrics=metrics, train_set=train_set, eval_set=eval_set,
                       checkpoint_path=str(checkpoint_path),
                       metrics_path=str(metrics_path),
                       config_path=str(config_path))


def format_metrics_csv(rows):
    return "\n".join([",".join(METRICS_COLUMNS)] + [r.to_csv() for r in rows]) + "\n"


def run_evaluation(cfg, net, pool, metric=None, retrieval_ks=None, seed=None):
    """Episodic evaluation (plus optional retrieval) of a trained network."""
    metric = metric or cfg.resolved_metric()
    proj = net.embed(pool.features)
    emb = evaluation.embed_for_metric(proj, metric, cfg.curvature)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    report = evaluation.run_episodes(emb, pool, cfg.episode_spec(), rng,
                                     metric=metric, curvature=cfg.curvature,
                                     k_nn=cfg.k_nn)
    if retrieval_ks:
        recall, mean_ap = evaluation.retrieval_metrics(
            emb, pool.fine, emb, pool.fine, retrieval_ks,
            metric=metric, curvature=cfg.curvature,
            gallery_instance=pool.instance_id, query_instance=pool.instance_id)
        report.recall = recall
        report.map = mean_ap
    return report


def evaluate_checkpoint(cfg, checkpoint_path, retrieval_ks=None):
    """Load a checkpoint, rebuild its model, and evaluate the config's pool."""
    meta, store, _ = ckpt_mod.load_checkpoint(checkpoint_path)
    net, _ = network.build_model(
        meta["space"], meta["n_coarse"], meta["encoder_dims"],
        meta["projector_dims"], meta["curvature"], store,
        np.random.default_rng(0))
    metric = cfg.metric or ("poincare" if meta["space"] == "hyperbolic" else "cosine")
    if meta["space"] == "euclidean" and metric == "poincare":
        raise config_mod.ConfigError(
            "a euclidean checkpoint cannot be evaluated with the poincare metric")
    if cfg.data:
        pool = data_mod.ingest_features(cfg.data)
    else:
        _, pool = data_mod.generate(cfg.synthetic_spec())
    eval_cfg = dataclasses.replace(cfg, curvature=meta["curvature"])
    return run_evaluation(eval_cfg, net, pool, metric=metric, retrieval_ks=retrieval_ks)


def _atomic_write_text(path, text):
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
