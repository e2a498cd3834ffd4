"""The round protocol: client data collection and rebalancing, local OGD, FedAvg,
prototype exchange, evaluation, and the hindsight/regret diagnostics."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import prototype as P
from .config import ExperimentConfig
from .model import (GlobalModel, LossConfig, ModelInputs, ShapeError, backward, check_congruent,
                    forward, local_update, loss_value, ogd_step)
from .numerics import Rng, log_softmax

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "strategy", "seed", "train_loss", "test_acc", "cum_loss", "avg_regret_clean",
               "avg_regret_degraded", "bytes_model_up", "bytes_model_down", "bytes_proto_up",
               "bytes_proto_down")


@dataclass(frozen=True)
class Strategy:
    kind: str = "FC"
    beta: float = 0.5
    bits: int = 32

    @property
    def quantity_injection(self) -> bool:
        return self.kind != "FC"

    @property
    def quality_injection(self) -> bool:
        return self.kind != "PQ"

    @property
    def missing_policy(self) -> str:
        if self.kind == "IS":
            return "drop"
        if self.kind in ("PNR", "QQR"):
            return "prototype"
        return "zero"

    @property
    def prototype_loss(self) -> bool:
        return self.kind in ("PLR", "QQR")

    @property
    def exchanges_prototypes(self) -> bool:
        return self.kind in ("PNR", "PLR", "QQR")


@dataclass
class RoundMetrics:
    round: int
    mean_train_loss: float
    test_accuracy: float
    test_loss: float
    bytes_model_up: int
    bytes_model_down: int
    bytes_proto_up: int
    bytes_proto_down: int
    cumulative_loss: float
    clean_loss: float
    degraded_loss: float
    effective_samples: int = 0
    skipped_clients: int = 0
    zero_fallbacks: int = 0
    pce_fallbacks: int = 0
    avg_regret_clean: float | None = None
    avg_regret_degraded: float | None = None


@dataclass
class ClientResult:
    client: int
    model: GlobalModel
    protos: P.QuantizedPrototypeSet | None
    train_loss: float
    clean_loss: float
    degraded_loss: float
    effective: int
    skipped: bool
    zero_fallbacks: int
    pce_fallbacks: int
    window: np.ndarray
    degraded_inputs: ModelInputs | None


# ---------------------------------------------------------------------------
# building blocks


def fedavg(models: list, order: list | None = None) -> GlobalModel:
    """Coordinate-wise mean.  ``models`` may be (client, model) pairs; summation
    always runs in ascending client index."""
    if not models:
        raise ValueError("fedavg needs at least one model")
    if isinstance(models[0], tuple):
        pairs = sorted(models, key=lambda p: p[0])
        models = [m for _, m in pairs]
    first = models[0]
    for m in models[1:]:
        try:
            check_congruent(first, m)
        except ShapeError as e:
            raise P.ProtocolError(str(e)) from None
    acc = first.copy()
    for m in models[1:]:
        acc = acc.map(np.add, m)
    k = float(len(models))
    return acc.map(lambda a: a / k)


def complete_inputs(pool_or_batch) -> ModelInputs:
    n = len(pool_or_batch.labels)
    return ModelInputs(list(pool_or_batch.features), np.ones((n, len(pool_or_batch.features)), dtype=bool),
                       pool_or_batch.labels)


def evaluate(model: GlobalModel, test) -> tuple[float, float]:
    """(accuracy, mean CE) on a complete, clean test set."""
    if len(test.labels) == 0:
        raise ValueError("empty test set")
    logits, _ = forward(model, complete_inputs(test))
    labels = np.asarray(test.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    loss = float(np.mean(-log_softmax(logits)[np.arange(len(labels)), labels]))
    return acc, loss


def build_inputs(batch: D.RoundBatch, strategy: Strategy, bank: P.PrototypeBank | None,
                 d_feat: int) -> tuple[ModelInputs, int]:
    """Model inputs after the strategy's missing-modality handling, plus the
    number of cold-start zero substitutions."""
    n, m = batch.available.shape
    present = batch.available.copy()
    labels = batch.labels
    policy = strategy.missing_policy
    if policy == "drop":
        keep = np.flatnonzero(present.all(axis=1))
        inp = ModelInputs([f[keep] for f in batch.features], present[keep], labels[keep])
        return inp, 0
    subst = []
    fallbacks = 0
    for mod in range(m):
        s = np.zeros((n, d_feat))
        missing = np.flatnonzero(~present[:, mod])
        if policy == "prototype" and len(missing):
            filled = bank.updates[mod, labels[missing]] > 0
            rows = missing[filled]
            s[rows] = bank.vectors[mod, labels[rows]]
            fallbacks += int((~filled).sum())
        subst.append(s)
    return ModelInputs(list(batch.features), present, labels, subst), fallbacks


def regret_trace(online, hindsight) -> np.ndarray:
    online = np.asarray(online, dtype=float)
    hindsight = np.asarray(hindsight, dtype=float)
    if online.shape != hindsight.shape:
        raise ValueError(f"length mismatch: {online.shape} vs {hindsight.shape}")
    return np.cumsum(online - hindsight) / np.arange(1, len(online) + 1)


@dataclass
class HindsightComparator:
    """Offline approximation of the best fixed model for a finished stream."""

    model: GlobalModel
    losses: list = field(default_factory=list)  # training objective per epoch
    epochs: int = 0
    approximate: bool = True


def train_hindsight(inputs: ModelInputs, weights: np.ndarray, init: GlobalModel, epochs: int,
                    eta: float = 0.5, tol: float = 1e-5, window: int = 10) -> HindsightComparator:
    """Full-gradient descent on the weighted union of all rounds' data.

    Stops when the objective improves by less than ``tol`` over ``window``
    epochs; the step is halved whenever an epoch increases the objective.
    """
    cfg = LossConfig(weights=np.asarray(weights, dtype=float), norm=1.0)
    model = init.copy()
    loss, grad = backward(model, inputs, cfg)
    history = [loss]
    for ep in range(epochs):
        cand = ogd_step(model, grad, eta)
        new_loss, new_grad = backward(cand, inputs, cfg)
        while new_loss > loss and eta > 1e-6:
            eta *= 0.5
            cand = ogd_step(model, grad, eta)
            new_loss, new_grad = backward(cand, inputs, cfg)
        model, loss, grad = cand, new_loss, new_grad
        history.append(loss)
        if len(history) > window and history[-1 - window] - history[-1] < tol:
            break
    return HindsightComparator(model, history, len(history) - 1)


# ---------------------------------------------------------------------------
# the simulation


def _split_test(rng: Rng, pool: D.Pool, test_size: int) -> tuple[D.Pool, D.Pool]:
    if test_size >= len(pool):
        raise ValueError("test_size must leave samples for training")
    perm = rng.gen.permutation(len(pool))
    return pool.take(perm[test_size:]), pool.take(perm[:test_size])


def build_data(cfg: ExperimentConfig, rng: Rng) -> tuple[list[D.Pool], D.Pool]:
    d = cfg.data
    if d.source == "mvsa-single":
        raise ValueError("data.source = mvsa-single is documentation only; the text/image pipeline is not provided")
    if d.source == "har-file":
        pool = D.load_har_numeric(d.path, d.layout, classes=d.C)
        train, test = _split_test(rng.child("test-split"), pool, d.test_size)
    else:
        means = D.class_means(rng.child("means"), d.C, d.dims, d.separation, d.offset)
        train = D.synth_pool(rng.child("pool"), d.C, d.dims, d.pool_size, d.separation, means)
        test = D.synth_pool(rng.child("test"), d.C, d.dims, d.test_size, d.separation, means)
    parts = D.partition_dirichlet(rng.child("partition"), train, d.alpha, d.K)
    for k, p in enumerate(parts):
        if len(p) == 0:
            raise ValueError(f"client {k} received no samples; raise data.pool_size or data.alpha")
    return parts, test


class Federation:
    """Server state plus the K client streams for one (config, seed) run."""

    def __init__(self, cfg: ExperimentConfig, seed: int | None = None, workers: int | None = None,
                 keep_history: bool | None = None):
        self.cfg = cfg
        self.seed = cfg.run.seed if seed is None else seed
        self.workers = cfg.run.workers if workers is None else workers
        self.keep_history = cfg.run.regret if keep_history is None else keep_history
        self.rng = Rng(self.seed)
        self.strategy = Strategy(cfg.strategy.kind, cfg.strategy.beta, cfg.strategy.bits)
        d, mc = cfg.data, cfg.model
        self.pools, self.test = build_data(cfg, self.rng.child("data"))
        self.dims = tuple(p for p in self.pools[0].dims)
        self.streams = [D.ClientStream(p, d.N, d.refresh, k) for k, p in enumerate(self.pools)]
        im = cfg.imbalance
        self.spec = D.ImbalanceSpec(im.miss_fraction, im.round_fraction_quantity, im.round_fraction_quality,
                                    im.snr_db, self.seed, cfg.run.T)
        self.model = GlobalModel.init(self.rng.child("model"), self.dims, d.C, mc.h, mc.d_feat)
        self.initial_model = self.model.copy()
        self.bank = P.PrototypeBank.empty(len(self.dims), d.C, mc.d_feat, literal_t=cfg.run.literal_t)
        self.t = 0
        self.metrics: list[RoundMetrics] = []
        self.cum_loss = 0.0
        self.windows: list[list[np.ndarray]] = []  # per round, per client: pool indices
        self.degraded: list[list[ModelInputs]] = []
        self.degraded_differs = False

    # -- client side ---------------------------------------------------------

    def _client(self, k: int, t: int, model: GlobalModel, bank: P.PrototypeBank) -> ClientResult:
        st = self.strategy
        stream = self.streams[k]
        clean = stream.advance()
        window = stream.window_indices.copy()
        batch = clean
        crng = self.rng.child("client", k, "round", t)
        if st.quantity_injection:
            batch = D.inject_quantity(batch, self.spec, t, crng.child("quantity"))
        if st.quality_injection:
            batch = D.inject_quality(batch, self.spec, t, crng.child("quality"))

        n = len(clean)
        clean_loss = loss_value(model, complete_inputs(clean), LossConfig(norm=n))
        inp, zero_fb = build_inputs(batch, st, bank, self.cfg.model.d_feat)
        degraded_loss = loss_value(model, inp, LossConfig(norm=n))

        pce_fb = 0
        if st.prototype_loss:
            low = [m for m in range(batch.num_modalities) if not batch.quality[m]]
            ready = tuple(m for m in low if bank.row_complete(m))
            pce_fb = len(low) - len(ready)
            loss_cfg = LossConfig(st.beta, bank.vectors, ready if st.beta > 0 else (), norm=n)
        else:
            loss_cfg = LossConfig(norm=n)

        eta = self.cfg.model.eta_at(t)
        if len(inp) == 0:
            log.info("client %d skips round %d: no complete samples", k, t)
            local, train_loss, skipped = model.copy(), 0.0, True
        else:
            local, train_loss = local_update(model, inp, loss_cfg, self.cfg.model.E, eta)
            skipped = False

        protos = None
        if st.exchanges_prototypes:
            lp = P.local_prototypes(batch, local.encoders)
            lp.client, lp.round = k, t
            protos = P.quantize(lp, st.bits)
        return ClientResult(k, local, protos, train_loss, clean_loss, degraded_loss, len(inp), skipped,
                            zero_fb, pce_fb, window, inp if self.keep_history else None)

    # -- server side ---------------------------------------------------------

    def run_round(self) -> RoundMetrics:
        t = self.t
        model = self.model
        bank = self.bank.copy()
        K = len(self.streams)
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                results = list(ex.map(lambda k: self._client(k, t, model, bank), range(K)))
        else:
            results = [self._client(k, t, model, bank) for k in range(K)]
        results.sort(key=lambda r: r.client)

        self.model = fedavg([(r.client, r.model) for r in results])
        model_bytes = self.model.wire_size()
        proto_up = proto_down = 0
        if self.strategy.exchanges_prototypes:
            sets = []
            for r in results:
                proto_up += P.wire_size(r.protos)
                sets.append(P.dequantize(r.protos))
            instant = P.aggregate_instant(sets, weighted=self.cfg.run.weighted_protos)
            self.bank.update(instant, t)
            filled = int((self.bank.updates > 0).sum())
            per_cell = P.ENTRY_HEADER_BYTES + P.SCALE_BYTES + P.payload_bytes(self.cfg.model.d_feat, P.FULL_PRECISION)
            proto_down = K * filled * per_cell

        acc, test_loss = evaluate(self.model, self.test)
        clean = float(np.mean([r.clean_loss for r in results]))
        degraded = float(np.mean([r.degraded_loss for r in results]))
        self.cum_loss += clean
        if self.keep_history:
            self.windows.append([r.window for r in results])
            self.degraded.append([r.degraded_inputs for r in results])
        if degraded != clean:
            self.degraded_differs = True
        m = RoundMetrics(
            round=t,
            mean_train_loss=float(np.mean([r.train_loss for r in results])),
            test_accuracy=acc, test_loss=test_loss,
            bytes_model_up=K * model_bytes, bytes_model_down=K * model_bytes,
            bytes_proto_up=proto_up, bytes_proto_down=proto_down,
            cumulative_loss=self.cum_loss, clean_loss=clean, degraded_loss=degraded,
            effective_samples=sum(r.effective for r in results),
            skipped_clients=sum(r.skipped for r in results),
            zero_fallbacks=sum(r.zero_fallbacks for r in results),
            pce_fallbacks=sum(r.pce_fallbacks for r in results),
        )
        self.metrics.append(m)
        self.t += 1
        return m

    def run(self, rounds: int | None = None) -> list[RoundMetrics]:
        rounds = self.cfg.run.T if rounds is None else rounds
        for _ in range(rounds):
            self.run_round()
        return self.metrics

    # -- regret diagnostics --------------------------------------------------

    def _clean_union(self) -> tuple[ModelInputs, np.ndarray, list]:
        """Unique (client, pool row) samples with their multiplicity weights."""
        K, N = len(self.streams), self.cfg.data.N
        parts, weights, lookups = [], [], []
        offset = 0
        for k, pool in enumerate(self.pools):
            counts = np.zeros(len(pool))
            for rnd in self.windows:
                np.add.at(counts, rnd[k], 1.0)
            rows = np.flatnonzero(counts)
            lookup = np.full(len(pool), -1)
            lookup[rows] = np.arange(len(rows)) + offset
            offset += len(rows)
            lookups.append(lookup)
            parts.append(pool.take(rows))
            weights.append(counts[rows] / (K * N))
        feats = [np.concatenate([p.features[m] for p in parts]) for m in range(len(self.dims))]
        labels = np.concatenate([p.labels for p in parts])
        inp = ModelInputs(feats, np.ones((len(labels), len(feats)), dtype=bool), labels)
        return inp, np.concatenate(weights), lookups

    def _per_sample_ce(self, model: GlobalModel, inp: ModelInputs) -> np.ndarray:
        logits, _ = forward(model, inp)
        return -log_softmax(logits)[np.arange(len(inp)), inp.labels]

    def hindsight(self, epochs: int | None = None) -> dict:
        """Fit comparators and fill the per-round average-regret traces."""
        if not self.keep_history:
            raise RuntimeError("run was created without history; enable run.regret")
        epochs = self.cfg.run.hindsight_epochs if epochs is None else epochs
        eta = self.cfg.run.hindsight_eta
        K, N, T = len(self.streams), self.cfg.data.N, len(self.metrics)

        inp, w, lookups = self._clean_union()
        comp = train_hindsight(inp, w, self.initial_model, epochs, eta)
        per = self._per_sample_ce(comp.model, inp)
        hind_clean = np.array([
            np.mean([per[lookups[k][rnd[k]]].sum() / N for k in range(K)]) for rnd in self.windows
        ])
        online_clean = np.array([m.clean_loss for m in self.metrics])
        r_clean = regret_trace(online_clean, hind_clean)

        if self.degraded_differs:
            flat = [x for rnd in self.degraded for x in rnd]
            sizes = [len(x) for x in flat]
            stacked = _stack_inputs(flat, len(self.dims), self.cfg.model.d_feat)
            dw = np.full(len(stacked), 1.0 / (K * N))
            dcomp = train_hindsight(stacked, dw, self.initial_model, epochs, eta)
            dper = self._per_sample_ce(dcomp.model, stacked)
            bounds = np.cumsum([0] + sizes)
            per_client = np.array([dper[bounds[i]:bounds[i + 1]].sum() / N for i in range(len(flat))])
            hind_deg = per_client.reshape(T, K).mean(axis=1)
        else:
            dcomp, hind_deg = comp, hind_clean
        online_deg = np.array([m.degraded_loss for m in self.metrics])
        r_deg = regret_trace(online_deg, hind_deg)
        for m, rc, rd in zip(self.metrics, r_clean, r_deg):
            m.avg_regret_clean = float(rc)
            m.avg_regret_degraded = float(rd)
        return {"clean": comp, "degraded": dcomp, "hindsight_clean": hind_clean, "hindsight_degraded": hind_deg,
                "online_clean": online_clean, "online_degraded": online_deg}


def _stack_inputs(items: list[ModelInputs], modalities: int, d_feat: int) -> ModelInputs:
    xs = [np.concatenate([x.xs[m] for x in items]) for m in range(modalities)]
    present = np.concatenate([x.present for x in items])
    labels = np.concatenate([x.labels for x in items])
    subst = []
    for m in range(modalities):
        subst.append(np.concatenate([
            x.subst[m] if x.subst is not None else np.zeros((len(x), d_feat)) for x in items
        ]))
    return ModelInputs(xs, present, labels, subst)


def run_round(state: Federation) -> RoundMetrics:
    return state.run_round()


def metrics_rows(fed: Federation) -> list[dict]:
    rows = []
    for m in fed.metrics:
        rows.append({
            "round": m.round, "strategy": fed.strategy.kind, "seed": fed.seed,
            "train_loss": repr(m.mean_train_loss), "test_acc": repr(m.test_accuracy),
            "cum_loss": repr(m.cumulative_loss),
            "avg_regret_clean": "" if m.avg_regret_clean is None else repr(m.avg_regret_clean),
            "avg_regret_degraded": "" if m.avg_regret_degraded is None else repr(m.avg_regret_degraded),
            "bytes_model_up": m.bytes_model_up, "bytes_model_down": m.bytes_model_down,
            "bytes_proto_up": m.bytes_proto_up, "bytes_proto_down": m.bytes_proto_down,
        })
    return rows
