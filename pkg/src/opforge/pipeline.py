"""Corpus screening, windowed training, fragment-seeded growth, generations.

The flow mirrors the overall design: ingest SMILES, keep the drug-like
slice (QED strictly above threshold), train the next-token model on
stride-1 windows, then grow candidates from a seed fragment that must
carry P, F, O and C. ``run_generations`` closes the loop: generated
molecules that score well enough are folded back into a fine-tuning set,
and the model is re-trained between generations until the mean score
stops moving.

All randomness flows from explicit generators or a single master seed;
per-item generation streams are derived from (master seed, item index) so
batches are reproducible no matter how the work is distributed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from opforge import model as nn
from opforge import properties, smiles
from opforge.errors import (
    EmptyCorpus,
    OpforgeError,
    SeedMissingRequiredElements,
    SeedUntokenizable,
    TokenizeError,
    UnknownFormat,
)
from opforge.model import AdamState, ModelConfig, ModelParams
from opforge.properties import DescriptorVector, PropertyTables
from opforge.smiles import BOS_ID, EOS_ID, PAD_ID, Token, Vocabulary

DEFAULT_QED_THRESHOLD = 0.65
DEFAULT_SEED_FRAGMENT = "COP(=O)(F)"
REQUIRED_SEED_ELEMENTS = frozenset({"P", "F", "O", "C"})


@dataclass(frozen=True)
class CorpusRecord:
    smiles: str
    id: str | None = None
    qed: float | None = None


@dataclass(frozen=True)
class TrainingWindow:
    ids: tuple[int, ...]
    target: int


@dataclass(frozen=True)
class GenerationRecord:
    smiles: str
    valid: bool
    contains_fragment: bool
    descriptors: DescriptorVector | None
    qed: float | None
    length: int
    generation: int = 1
    index: int = 0

    @property
    def molecule_id(self) -> str:
        return f"gen{self.generation}-{self.index}"


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    count: int
    validity_rate: float
    uniqueness_rate: float
    mean_qed: float | None
    mean_qed_valid_unique: float | None


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    holdout_loss: float | None
    holdout_accuracy: float | None


@dataclass
class TrainResult:
    params: ModelParams
    config: ModelConfig
    vocab: Vocabulary
    log: list[EpochStats]
    best_epoch: int


@dataclass
class EvolveResult:
    stats: list[GenerationStats]
    records: list[GenerationRecord]
    params: ModelParams
    config: ModelConfig
    vocab: Vocabulary
    fine_tune_sizes: list[int] = field(default_factory=list)


# --- corpus ingestion --------------------------------------------------------


def _checked_record(text: str, name: str | None, qed_value: float | None) -> CorpusRecord:
    graph = smiles.parse(text)
    report = smiles.validate(graph)
    if not report.valid:
        raise OpforgeError(report.errors[0].message)
    return CorpusRecord(smiles=text, id=name, qed=qed_value)


def load_corpus(path: str | Path, fmt: str = "smi") -> tuple[list[CorpusRecord], int]:
    """Read molecules from a .smi or .csv file.

    Lines that fail to tokenize, parse or validate are skipped and
    counted, never fatal. Returns (records, skipped_count).

    Raises:
        UnknownFormat: fmt is not one of smi, csv.
        OSError: unreadable path.
    """
    path = Path(path)
    records: list[CorpusRecord] = []
    skipped = 0
    if fmt == "smi":
        for line in path.read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 1)
            name = parts[1].strip() if len(parts) > 1 else None
            try:
                records.append(_checked_record(parts[0], name, None))
            except OpforgeError:
                skipped += 1
    elif fmt == "csv":
        with path.open(newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None or "smiles" not in reader.fieldnames:
                raise UnknownFormat("csv corpus requires a 'smiles' column")
            for row in reader:
                try:
                    qed_text = (row.get("qed") or "").strip()
                    qed_value = float(qed_text) if qed_text else None
                    records.append(
                        _checked_record(row["smiles"].strip(), row.get("id") or None, qed_value)
                    )
                except (OpforgeError, ValueError):
                    skipped += 1
    else:
        raise UnknownFormat(f"unknown corpus format {fmt!r}")
    return records, skipped


def screen_corpus(
    records: list[CorpusRecord],
    tables: PropertyTables,
    qed_threshold: float = DEFAULT_QED_THRESHOLD,
) -> list[CorpusRecord]:
    """Keep records whose QED is strictly above the threshold, in order.

    Missing QED values are computed on the fly; records that cannot be
    scored are dropped.
    """
    kept: list[CorpusRecord] = []
    for record in records:
        value = record.qed
        if value is None:
            try:
                value = properties.qed_for_smiles(record.smiles, tables)
            except (OpforgeError, ValueError):
                continue
        if value > qed_threshold:
            kept.append(replace(record, qed=value))
    return kept


# --- windowing ---------------------------------------------------------------


def encode_molecule(tokens: list[Token], vocab: Vocabulary) -> list[int]:
    """Token ids with BOS prepended and EOS appended."""
    return [BOS_ID] + vocab.encode(tokens) + [EOS_ID]


def make_windows(ids: list[int], window_len: int) -> list[TrainingWindow]:
    """Stride-1 sliding windows over a BOS...EOS id sequence.

    Shorter-than-window prefixes are left-PAD-filled, so every position
    after BOS appears as a target exactly once (len(ids) - 1 windows).
    """
    windows = []
    for pos in range(1, len(ids)):
        start = max(0, pos - window_len)
        body = ids[start:pos]
        padded = [PAD_ID] * (window_len - len(body)) + body
        windows.append(TrainingWindow(ids=tuple(padded), target=ids[pos]))
    return windows


def _window_arrays(
    molecules: list[list[int]], window_len: int
) -> tuple[np.ndarray, np.ndarray]:
    inputs: list[tuple[int, ...]] = []
    targets: list[int] = []
    for ids in molecules:
        for window in make_windows(ids, window_len):
            inputs.append(window.ids)
            targets.append(window.target)
    if not inputs:
        raise EmptyCorpus("no training windows")
    return np.asarray(inputs, dtype=np.int64), np.asarray(targets, dtype=np.int64)


# --- training ----------------------------------------------------------------


def _evaluate(
    windows: np.ndarray,
    targets: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    batch_size: int,
) -> tuple[float, float]:
    total_loss = 0.0
    correct = 0
    for start in range(0, len(targets), batch_size):
        chunk = slice(start, start + batch_size)
        probs = nn.batch_probs(windows[chunk], params, config)
        picked = probs[np.arange(len(targets[chunk])), targets[chunk]]
        total_loss += -np.log(np.maximum(picked, 1e-300)).sum()
        correct += int((probs.argmax(axis=1) == targets[chunk]).sum())
    n = len(targets)
    return total_loss / n, correct / n


def train(
    records: list[CorpusRecord],
    config: ModelConfig,
    epochs: int,
    batch_size: int = 64,
    holdout_fraction: float = 0.05,
    rng: np.random.Generator | None = None,
    *,
    vocab: Vocabulary | None = None,
    initial_params: ModelParams | None = None,
    lr: float = 1e-3,
    log_fn=None,
) -> TrainResult:
    """Fit the next-token model on a screened corpus.

    Molecules (not windows) are split into train/holdout so no molecule
    leaks across the boundary. Returns the parameters of the epoch with
    the best holdout loss (final epoch when holdout_fraction is 0).

    ``vocab``/``initial_params`` continue training an existing model, e.g.
    for the between-generation fine-tuning passes.

    Raises:
        EmptyCorpus: no records or no windows.
    """
    if not records:
        raise EmptyCorpus("cannot train on an empty corpus")
    rng = rng or np.random.default_rng(config.rng_seed)

    token_lists = [smiles.tokenize(r.smiles) for r in records]
    if vocab is None:
        vocab = smiles.build_vocabulary(token_lists)
        config = replace(config, vocab_size=len(vocab))
    elif config.vocab_size != len(vocab):
        config = replace(config, vocab_size=len(vocab))
    encoded = [encode_molecule(tokens, vocab) for tokens in token_lists]

    order = rng.permutation(len(encoded))
    n_holdout = int(round(holdout_fraction * len(encoded)))
    if holdout_fraction > 0 and n_holdout == 0 and len(encoded) > 1:
        n_holdout = 1
    holdout_molecules = [encoded[i] for i in order[:n_holdout]]
    train_molecules = [encoded[i] for i in order[n_holdout:]]

    train_x, train_y = _window_arrays(train_molecules, config.window_len)
    if holdout_molecules:
        hold_x, hold_y = _window_arrays(holdout_molecules, config.window_len)
    else:
        hold_x = hold_y = None

    params = initial_params.copy() if initial_params is not None else nn.init_params(config, rng)
    state = AdamState.zeros(params)

    log: list[EpochStats] = []
    best_epoch = 0
    best_loss = np.inf
    best_params = params.copy()

    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(train_y))
        epoch_loss = 0.0
        epoch_correct = 0
        for start in range(0, len(perm), batch_size):
            idx = perm[start : start + batch_size]
            loss, grads, correct = nn.batch_loss_and_grads(
                train_x[idx], train_y[idx], params, config
            )
            params, state = nn.adam_step(params, grads, state, lr=lr)
            epoch_loss += loss * len(idx)
            epoch_correct += correct

        if hold_x is not None:
            hold_loss, hold_acc = _evaluate(hold_x, hold_y, params, config, batch_size)
        else:
            hold_loss = hold_acc = None
        stats = EpochStats(
            epoch=epoch,
            train_loss=epoch_loss / len(train_y),
            train_accuracy=epoch_correct / len(train_y),
            holdout_loss=hold_loss,
            holdout_accuracy=hold_acc,
        )
        log.append(stats)
        if log_fn is not None:
            log_fn(stats)

        current = hold_loss if hold_loss is not None else -epoch  # no holdout: keep last
        if current < best_loss:
            best_loss = current
            best_epoch = epoch
            best_params = params.copy()

    return TrainResult(params=best_params, config=config, vocab=vocab, log=log, best_epoch=best_epoch)


# --- generation ---------------------------------------------------------------


def _seed_tokens(seed_smiles: str) -> list[Token]:
    try:
        tokens = smiles.tokenize(seed_smiles)
    except TokenizeError as exc:
        raise SeedUntokenizable(f"seed fragment does not tokenize: {exc}") from exc
    if not tokens:
        raise SeedUntokenizable("seed fragment is empty")
    elements = {tok.element() for tok in tokens if tok.is_atom()}
    missing = REQUIRED_SEED_ELEMENTS - elements
    if missing:
        raise SeedMissingRequiredElements(
            f"seed fragment must contain P, F, O and C; missing {sorted(missing)}"
        )
    return tokens


def _seed_prefix_graph(tokens: list[Token]) -> smiles.MolecularGraph | None:
    """Longest tokenized prefix of the seed that parses into a graph."""
    for end in range(len(tokens), 0, -1):
        try:
            return smiles.parse(tokens[:end])
        except OpforgeError:
            continue
    return None


def _initial_window(prefix_ids: list[int], window_len: int) -> list[int]:
    ids = [BOS_ID] + prefix_ids
    if len(ids) >= window_len:
        return ids[-window_len:]
    return [PAD_ID] * (window_len - len(ids)) + ids


def _grow_continuations(
    prefix_ids: list[int],
    params: ModelParams,
    config: ModelConfig,
    temperature: float,
    max_len: int,
    rngs: list[np.random.Generator],
) -> list[list[int]]:
    """Sample continuations for one shared prefix across many streams.

    The forward math is batched over the still-active sequences while each
    item draws from its own generator, so results are identical however
    the items are grouped.
    """
    n = len(rngs)
    windows = [list(_initial_window(prefix_ids, config.window_len)) for _ in range(n)]
    grown: list[list[int]] = [[] for _ in range(n)]
    active = list(range(n))
    budget = max_len - len(prefix_ids)
    steps = 0
    while active and steps < budget:
        batch = np.asarray([windows[k] for k in active], dtype=np.int64)
        probs = nn.batch_probs(batch, params, config)
        still = []
        for row, k in enumerate(active):
            token_id = nn.sample_next(probs[row], temperature, rngs[k])
            if token_id in (EOS_ID, PAD_ID, BOS_ID):
                continue  # terminal draw: sequence is finished
            grown[k].append(token_id)
            windows[k] = windows[k][1:] + [token_id]
            still.append(k)
        active = still
        steps += 1
    return grown


def _score_generation(
    seed_text: str,
    seed_prefix: smiles.MolecularGraph | None,
    continuation: list[Token],
    tables: PropertyTables,
    generation: int,
    index: int,
    skip_alerts: bool = False,
) -> GenerationRecord:
    text = seed_text + smiles.detokenize(continuation)
    length = len(smiles.tokenize(seed_text)) + len(continuation)
    valid = False
    contains = False
    vector = None
    score = None
    try:
        graph = smiles.parse(text)
        valid = smiles.validate(graph).valid
    except OpforgeError:
        graph = None
    if valid and graph is not None:
        if seed_prefix is not None:
            contains = smiles.match_substructure(graph, seed_prefix) >= 1
        vector = properties.descriptors(graph, tables, skip_alerts=skip_alerts)
        score = properties.qed(vector, tables)
    return GenerationRecord(
        smiles=text,
        valid=valid,
        contains_fragment=contains,
        descriptors=vector,
        qed=score,
        length=length,
        generation=generation,
        index=index,
    )


def stats_from_records(records: list[GenerationRecord], generation: int) -> GenerationStats:
    n = len(records)
    if n == 0:
        return GenerationStats(generation, 0, 0.0, 0.0, None, None)
    valid = [r for r in records if r.valid]
    distinct: dict[str, GenerationRecord] = {}
    for record in records:
        distinct.setdefault(record.smiles, record)
    valid_unique = [r for r in distinct.values() if r.valid]
    mean_qed = float(np.mean([r.qed for r in valid])) if valid else None
    mean_vu = float(np.mean([r.qed for r in valid_unique])) if valid_unique else None
    return GenerationStats(
        generation=generation,
        count=n,
        validity_rate=len(valid) / n,
        uniqueness_rate=len(distinct) / n,
        mean_qed=mean_qed,
        mean_qed_valid_unique=mean_vu,
    )


def _resolve_streams(
    rng: np.random.Generator | np.random.SeedSequence | int, n: int
) -> list[np.random.Generator]:
    if isinstance(rng, np.random.SeedSequence):
        root = rng
    else:
        master = rng if isinstance(rng, int) else int(rng.integers(2**63))
        root = np.random.SeedSequence(master)
    return [np.random.default_rng(child) for child in root.spawn(n)]


def grow(
    seed_smiles: str,
    params: ModelParams,
    config: ModelConfig,
    vocab: Vocabulary,
    tables: PropertyTables,
    temperature: float = 1.0,
    max_len: int = 100,
    rng: np.random.Generator | None = None,
    *,
    generation: int = 1,
    index: int = 0,
    skip_alerts: bool = False,
) -> GenerationRecord:
    """Grow one molecule from the seed fragment and score it.

    The output SMILES always begins with the exact seed text; validity and
    fragment containment are checked on the finished string.

    Raises:
        SeedUntokenizable: the seed does not tokenize or is outside the
            model vocabulary.
        SeedMissingRequiredElements: P, F, O or C element tokens missing.
    """
    tokens = _seed_tokens(seed_smiles)
    try:
        prefix_ids = vocab.encode(tokens)
    except KeyError as exc:
        raise SeedUntokenizable(f"seed token {exc} not in the model vocabulary") from exc
    if max_len <= len(tokens):
        raise ValueError("max_len must exceed the seed length")
    rng = rng or np.random.default_rng(config.rng_seed)
    grown = _grow_continuations(prefix_ids, params, config, temperature, max_len, [rng])[0]
    continuation = vocab.decode(grown)
    return _score_generation(
        seed_smiles,
        _seed_prefix_graph(tokens),
        continuation,
        tables,
        generation,
        index,
        skip_alerts,
    )


def generate_batch(
    seed_smiles: str,
    params: ModelParams,
    config: ModelConfig,
    vocab: Vocabulary,
    tables: PropertyTables,
    n: int = 1200,
    temperature: float = 1.0,
    max_len: int = 100,
    rng: np.random.Generator | np.random.SeedSequence | int = 0,
    *,
    generation: int = 1,
    skip_alerts: bool = False,
) -> tuple[list[GenerationRecord], GenerationStats]:
    """Grow ``n`` molecules from one seed and aggregate their statistics.

    Item ``i`` samples from a stream derived from (master seed, i), so the
    batch is bitwise reproducible and could be fanned out across workers
    without changing results.
    """
    tokens = _seed_tokens(seed_smiles)
    try:
        prefix_ids = vocab.encode(tokens)
    except KeyError as exc:
        raise SeedUntokenizable(f"seed token {exc} not in the model vocabulary") from exc
    if max_len <= len(tokens):
        raise ValueError("max_len must exceed the seed length")
    streams = _resolve_streams(rng, n)
    grown = (
        _grow_continuations(prefix_ids, params, config, temperature, max_len, streams)
        if n
        else []
    )
    seed_prefix = _seed_prefix_graph(tokens)
    records = [
        _score_generation(
            seed_smiles, seed_prefix, vocab.decode(ids), tables, generation, i, skip_alerts
        )
        for i, ids in enumerate(grown)
    ]
    return records, stats_from_records(records, generation)


def sample_strings(
    params: ModelParams,
    config: ModelConfig,
    vocab: Vocabulary,
    n: int,
    temperature: float = 1.0,
    max_len: int = 100,
    rng: np.random.Generator | np.random.SeedSequence | int = 0,
) -> list[str]:
    """Sample unconditioned strings (no seed fragment) from the model."""
    streams = _resolve_streams(rng, n)
    grown = _grow_continuations([], params, config, temperature, max_len, streams)
    return [smiles.detokenize(vocab.decode(ids)) for ids in grown]


# --- generational loop ---------------------------------------------------------


def run_generations(
    corpus: list[CorpusRecord],
    config: ModelConfig,
    generations: int = 3,
    qed_augment_threshold: float = 0.5,
    fine_tune_epochs: int = 2,
    *,
    tables: PropertyTables,
    seed_smiles: str = DEFAULT_SEED_FRAGMENT,
    n_per_generation: int = 1200,
    temperature: float = 1.0,
    max_len: int = 100,
    master_seed: int = 0,
    base_epochs: int = 5,
    batch_size: int = 64,
    holdout_fraction: float = 0.05,
    lr: float = 1e-3,
    base_params: ModelParams | None = None,
    base_vocab: Vocabulary | None = None,
    min_improvement: float = 0.01,
    fine_tune_lr: float | None = None,
    skip_alerts: bool = False,
    log_fn=None,
) -> EvolveResult:
    """Generate, filter, fine-tune: the closed loop over G generations.

    Each generation grows ``n_per_generation`` molecules; valid unique
    ones scoring above ``qed_augment_threshold`` join the accumulated
    fine-tuning set, and the model trains on that set for
    ``fine_tune_epochs`` before the next generation. The loop stops early
    once the mean score of valid unique molecules improves by less than
    ``min_improvement``.
    """
    if base_params is None or base_vocab is None:
        base = train(
            corpus,
            config,
            epochs=base_epochs,
            batch_size=batch_size,
            holdout_fraction=holdout_fraction,
            rng=np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=(0,))),
            lr=lr,
            log_fn=log_fn,
        )
        params, config, vocab = base.params, base.config, base.vocab
    else:
        params, vocab = base_params, base_vocab
        config = replace(config, vocab_size=len(vocab))

    all_records: list[GenerationRecord] = []
    stats_list: list[GenerationStats] = []
    fine_tune_sizes: list[int] = []
    accepted: list[CorpusRecord] = []
    seen: set[str] = set()
    previous_mean: float | None = None

    for generation in range(1, generations + 1):
        records, stats = generate_batch(
            seed_smiles,
            params,
            config,
            vocab,
            tables,
            n=n_per_generation,
            temperature=temperature,
            max_len=max_len,
            rng=np.random.SeedSequence(entropy=master_seed, spawn_key=(generation,)),
            generation=generation,
            skip_alerts=skip_alerts,
        )
        all_records.extend(records)
        stats_list.append(stats)
        if log_fn is not None:
            log_fn(stats)

        current_mean = stats.mean_qed_valid_unique or 0.0
        if previous_mean is not None and current_mean - previous_mean < min_improvement:
            break
        previous_mean = current_mean
        if generation == generations:
            break

        for record in records:
            if (
                record.valid
                and record.qed is not None
                and record.qed > qed_augment_threshold
                and record.smiles not in seen
            ):
                seen.add(record.smiles)
                accepted.append(CorpusRecord(smiles=record.smiles, qed=record.qed))
        fine_tune_sizes.append(len(accepted))
        if accepted and fine_tune_epochs > 0:
            tuned = train(
                accepted,
                config,
                epochs=fine_tune_epochs,
                batch_size=batch_size,
                holdout_fraction=0.0,
                rng=np.random.default_rng(
                    np.random.SeedSequence(entropy=master_seed, spawn_key=(generation, 1))
                ),
                vocab=vocab,
                initial_params=params,
                lr=fine_tune_lr if fine_tune_lr is not None else lr,
            )
            params = tuned.params

    return EvolveResult(
        stats=stats_list,
        records=all_records,
        params=params,
        config=config,
        vocab=vocab,
        fine_tune_sizes=fine_tune_sizes,
    )
