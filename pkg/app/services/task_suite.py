"""Synthetic verifiable addition task.

Prompt: ``<bos> a1 a0 + b1 b0 = ?`` with zero-padded fixed-width operands.
CoT:    one ``c <carry> <digit> ;`` step per column (least significant first), then
        ``<ans>`` and the answer digits without leading zeros. Completions are padded
        with ``<pad>`` to the fixed generation length.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ConfigurationError, ContractError, PromptLookupError
from app.core.seeding import stream
from app.models.task import Dataset, Problem

logger = logging.getLogger(__name__)


class Vocabulary:
    SYMBOLS: Tuple[str, ...] = tuple(str(d) for d in range(10)) + ("+", "=", "<bos>", "<ans>", "<pad>", "c", ";", "?")

    def __init__(self) -> None:
        self.index: Dict[str, int] = {s: i for i, s in enumerate(self.SYMBOLS)}

    def __len__(self) -> int:
        return len(self.SYMBOLS)

    def __getitem__(self, symbol: str) -> int:
        return self.index[symbol]

    def encode(self, text: str) -> List[int]:
        """Space-separated symbols to ids."""
        try:
            return [self.index[s] for s in text.split()]
        except KeyError as exc:
            raise ConfigurationError(f"unknown symbol {exc.args[0]!r}") from exc

    def decode(self, ids: Iterable[int], strip_padding: bool = True) -> str:
        symbols = [self.SYMBOLS[int(i)] for i in ids]
        if strip_padding:
            symbols = [s for s in symbols if s != "<pad>"]
        return " ".join(symbols)


VOCAB = Vocabulary()
PLUS, EQUALS, BOS, ANS, PAD, CARRY, STEP_END, QUERY = (
    VOCAB[s] for s in ("+", "=", "<bos>", "<ans>", "<pad>", "c", ";", "?")
)
VOCAB_SIZE = len(VOCAB)


def _digits(value: int, width: int) -> List[int]:
    return [int(ch) for ch in str(value).zfill(width)]


def make_problem(a: int, b: int, operand_digits: int) -> Problem:
    prompt = [BOS, *_digits(a, operand_digits), PLUS, *_digits(b, operand_digits), EQUALS, QUERY]
    a_digits, b_digits = _digits(a, operand_digits)[::-1], _digits(b, operand_digits)[::-1]
    cot: List[int] = []
    carry = 0
    for da, db in zip(a_digits, b_digits):
        column = da + db + carry
        carry = column // 10
        cot += [CARRY, carry, column % 10, STEP_END]
    value = [int(ch) for ch in str(a + b)]
    cot += [ANS, *value]
    return Problem(prompt=prompt, cot=cot, value=value)


def prompt_length(operand_digits: int) -> int:
    return 2 * operand_digits + 4


def cot_length_bound(operand_digits: int) -> int:
    return 4 * operand_digits + 1 + operand_digits + 1


def tier_bounds(operand_digits: int, k_benchmarks: int) -> List[Tuple[int, int]]:
    """K contiguous operand ranges of increasing magnitude over [0, 10^D)."""
    top = 10 ** operand_digits
    edges = np.linspace(0, top, k_benchmarks + 1).round().astype(int)
    bounds = [(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:])]
    if any(hi <= lo for lo, hi in bounds):
        raise ConfigurationError(f"{k_benchmarks} tiers do not fit {operand_digits}-digit operands")
    return bounds


def generate_dataset(
    seed: int,
    n_train: int,
    n_bench_per_task: int,
    k_benchmarks: int,
    operand_digits: int = 2,
) -> Tuple[Dataset, List[Dataset]]:
    """Train split D plus K benchmark tiers; no prompt appears in both D and any B_k."""
    if n_train < 1 or n_bench_per_task < 1:
        raise ConfigurationError("n_train and n_bench_per_task must be >= 1")
    bounds = tier_bounds(operand_digits, k_benchmarks)

    benchmarks: List[Dataset] = []
    held_out = set()
    for k, (lo, hi) in enumerate(bounds):
        width = hi - lo
        if n_bench_per_task > width * width:
            raise ConfigurationError(f"tier {k} has only {width * width} distinct problems")
        picks = stream(seed, "data", k).choice(width * width, size=n_bench_per_task, replace=False)
        pairs = [(lo + int(p) // width, lo + int(p) % width) for p in picks]
        held_out.update(pairs)
        benchmarks.append(
            Dataset(split="bench", name=f"tier{k}", seed=seed, problems=[make_problem(a, b, operand_digits) for a, b in pairs])
        )

    top = 10 ** operand_digits
    pool = np.array([p for p in range(top * top) if (p // top, p % top) not in held_out], dtype=np.int64)
    if n_train > pool.size:
        raise ConfigurationError(f"n_train={n_train} exceeds the {pool.size} problems left after holding out benchmarks")
    picks = stream(seed, "data", k_benchmarks).choice(pool, size=n_train, replace=False)
    train = Dataset(
        split="train", name="train", seed=seed,
        problems=[make_problem(int(p) // top, int(p) % top, operand_digits) for p in picks],
    )
    logger.info(
        "Generated datasets",
        extra={"ctx": {"seed": seed, "train": len(train), "benchmarks": [len(b) for b in benchmarks]}},
    )
    return train, benchmarks


def extract_value(completion: Sequence[int]) -> Optional[List[int]]:
    """Digit run right after the last `<ans>`; None when there is no such run."""
    tokens = [int(t) for t in completion]
    positions = [i for i, t in enumerate(tokens) if t == ANS]
    if not positions:
        return None
    value: List[int] = []
    for token in tokens[positions[-1] + 1:]:
        if not 0 <= token <= 9:
            break
        value.append(token)
    return value or None


def reward(completion: Sequence[int], reference_value: Sequence[int]) -> float:
    value = extract_value(completion)
    return 1.0 if value is not None and value == [int(t) for t in reference_value] else 0.0


def accuracy(completions: Sequence[Sequence[int]], benchmark: Dataset) -> float:
    """a_k: fraction of problems whose single completion extracts the reference value."""
    if len(benchmark) == 0:
        raise ContractError(f"benchmark {benchmark.name} is empty")
    if len(completions) != len(benchmark):
        raise ContractError(f"{len(completions)} completions for {len(benchmark)} problems")
    return float(np.mean([reward(c, p.value) for c, p in zip(completions, benchmark.problems)]))


def aggregate(accuracies: Sequence[float]) -> float:
    if not accuracies:
        raise ContractError("no benchmark accuracies to aggregate")
    return float(np.mean(accuracies))


def pad_completion(tokens: Sequence[int], length: int) -> List[int]:
    tokens = [int(t) for t in tokens]
    if len(tokens) > length:
        raise ConfigurationError(f"sequence of {len(tokens)} tokens does not fit completion length {length}")
    return tokens + [PAD] * (length - len(tokens))


def reference_completion(problem: Problem, length: int) -> List[int]:
    return pad_completion(problem.cot, length)


def value_lookup(datasets: Iterable[Dataset]) -> Dict[Tuple[int, ...], List[int]]:
    """prompt tokens -> reference value, used when scoring rollouts."""
    table: Dict[Tuple[int, ...], List[int]] = {}
    for dataset in datasets:
        for problem in dataset.problems:
            table[tuple(problem.prompt)] = problem.value
    return table


def lookup_value(table: Dict[Tuple[int, ...], List[int]], prompt: Sequence[int]) -> List[int]:
    key = tuple(int(t) for t in prompt)
    if key not in table:
        raise PromptLookupError(f"no reference value for prompt {VOCAB.decode(key)!r}")
    return table[key]


def export_jsonl(dataset: Dataset, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for problem in dataset.problems:
            handle.write(json.dumps(problem.model_dump(), separators=(",", ":")) + "\n")
    return path


def import_jsonl(path: Path, split: str, name: str, seed: int) -> Dataset:
    problems = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                problems.append(Problem.model_validate_json(line))
    return Dataset(split=split, name=name, seed=seed, problems=problems)
