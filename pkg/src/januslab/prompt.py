"""View-prompt assignment and PMI-based removal of contradictory words.

The conditional probabilities P(view | word present/absent) come from a
file-backed table; anything (e.g. an external masked-language-model run)
can emit that file, the simulator never does MLM inference itself.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

FRONT, BACK, SIDE, TOP = "front view", "back view", "side view", "top view"


class TableFormatError(Exception):
    """Malformed conditional-probability table file."""


class TableLookupError(KeyError):
    """Word/view pair missing from the table."""


@dataclass(frozen=True)
class Prompt:
    """User prompt as an ordered word list; protected words are never removed
    (their presence prior is pinned to 1)."""

    words: tuple
    protected: frozenset = frozenset()

    def __post_init__(self):
        if not self.protected <= set(self.words):
            raise ValueError("protected words must be a subset of the prompt")

    @staticmethod
    def from_string(text: str, protected=()) -> "Prompt":
        words = tuple(text.lower().split())
        return Prompt(words, frozenset(w.lower() for w in protected) & set(words))

    def text(self) -> str:
        return " ".join(self.words)


@dataclass
class ViewBinConfig:
    """Azimuth partition of the turntable into named view bins.

    Defaults: front spans [-22.5, 22.5] degrees, back is its antipode,
    side fills the rest; elevations above top_elevation_deg are "top view"
    regardless of azimuth.
    """

    front_half_width_deg: float = 22.5
    back_half_width_deg: float = 22.5
    top_elevation_deg: float = 60.0
    names: tuple = (FRONT, SIDE, BACK, TOP)

    def assign(self, azimuth_deg: float, elevation_deg: float) -> str:
        if not (math.isfinite(azimuth_deg) and math.isfinite(elevation_deg)):
            raise ValueError("non-finite camera angles")
        if elevation_deg > self.top_elevation_deg:
            return TOP
        az = azimuth_deg % 360.0
        if az <= self.front_half_width_deg or az >= 360.0 - self.front_half_width_deg:
            return FRONT
        if 180.0 - self.back_half_width_deg <= az <= 180.0 + self.back_half_width_deg:
            return BACK
        return SIDE

    def template_camera(self, name: str, base_elevation_deg: float) -> tuple:
        """Representative (azimuth_deg, elevation_deg) used to render the
        bin's template image."""
        centers = {FRONT: (0.0, base_elevation_deg),
                   SIDE: (90.0, base_elevation_deg),
                   BACK: (180.0, base_elevation_deg),
                   TOP: (0.0, 70.0)}
        if name not in centers:
            raise ValueError(f"unknown view bin {name!r}")
        return centers[name]


def assign_view_prompt(azimuth_deg: float, elevation_deg: float,
                       cfg: ViewBinConfig | None = None) -> str:
    return (cfg or ViewBinConfig()).assign(azimuth_deg, elevation_deg)


@dataclass
class CondProbTable:
    """P(view | word present), P(view | word absent) and a per-word prior."""

    rows: dict = field(default_factory=dict)   # (word, view) -> (p_present, p_absent)
    prior: dict = field(default_factory=dict)  # word -> P(word present)

    def views(self) -> tuple:
        return tuple(sorted({v for _, v in self.rows}))

    def words(self) -> tuple:
        return tuple(sorted({w for w, _ in self.rows}))

    def has(self, word: str) -> bool:
        return any(w == word for w, _ in self.rows)

    def lookup(self, word: str, view: str) -> tuple:
        try:
            return self.rows[(word, view)]
        except KeyError:
            raise TableLookupError(f"no table row for word {word!r}, view {view!r}")

    def validate(self, tol: float = 1e-6) -> list:
        """Return a list of human-readable violations (empty when valid)."""
        problems = []
        views = self.views()
        for word in self.words():
            for col in (0, 1):
                total = 0.0
                for v in views:
                    if (word, v) not in self.rows:
                        problems.append(f"word {word!r} missing view {v!r}")
                        break
                    p = self.rows[(word, v)][col]
                    if not 0.0 <= p <= 1.0:
                        problems.append(f"probability out of range for ({word!r}, {v!r})")
                    total += p
                else:
                    kind = "present" if col == 0 else "absent"
                    if abs(total - 1.0) > tol:
                        problems.append(
                            f"P(view|{word!r} {kind}) sums to {total:.8f}, not 1")
            pr = self.prior.get(word)
            if pr is None or not 0.0 <= pr <= 1.0:
                problems.append(f"bad prior for word {word!r}: {pr}")
        return problems


TABLE_COLUMNS = ("word", "view", "p_given_present", "p_given_absent", "prior")


def load_table(path) -> CondProbTable:
    table = CondProbTable()
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in TABLE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise TableFormatError(f"missing column(s): {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                word = row["word"].strip().lower()
                view = row["view"].strip()
                pp = float(row["p_given_present"])
                pa = float(row["p_given_absent"])
                prior = float(row["prior"])
            except (ValueError, AttributeError) as e:
                raise TableFormatError(f"line {lineno}: {e}") from e
            if word in table.prior and table.prior[word] != prior:
                raise TableFormatError(
                    f"line {lineno}: inconsistent prior for word {word!r}")
            table.rows[(word, view)] = (pp, pa)
            table.prior[word] = prior
    problems = table.validate()
    if problems:
        raise TableFormatError("; ".join(problems))
    return table


def save_table(table: CondProbTable, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TABLE_COLUMNS)
        for (word, view), (pp, pa) in sorted(table.rows.items()):
            writer.writerow([word, view, repr(pp), repr(pa), repr(table.prior[word])])


@dataclass
class PMIConfig:
    threshold: float = 0.95
    default_prior: float = 0.5
    normalizer: str = "max"  # or "mean"

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.normalizer not in ("max", "mean"):
            raise ValueError(f"unknown normalizer {self.normalizer!r}")


def pmi(view: str, word: str, table: CondProbTable,
        prior_override: float | None = None) -> float:
    """P(v|u) / sum_u' P(v|u') P(u') for u = word present."""
    pp, pa = table.lookup(word, view)
    prior = table.prior.get(word, 0.5) if prior_override is None else prior_override
    denom = pp * prior + pa * (1.0 - prior)
    if denom <= 0.0:
        raise ValueError(f"degenerate marginal P({view!r}) = 0")
    return pp / denom


def _word_pmis(word: str, table: CondProbTable, prior: float | None) -> dict:
    return {v: pmi(v, word, table, prior) for v in table.views()}


def debias_prompt(prompt: Prompt, view: str, table: CondProbTable,
                  cfg: PMIConfig | None = None) -> Prompt:
    """Remove non-protected words that contradict the active view prompt.

    A word is dropped when its raw PMI against the view is below 1 *and* its
    PMI normalized across all view prompts falls below the threshold.
    Protected words have P(u) = 1, which forces PMI = 1, so they survive.
    """
    cfg = cfg or PMIConfig()
    kept = []
    raw_by_word = {}
    for word in prompt.words:
        if word in prompt.protected:
            kept.append(word)
            continue
        if not table.has(word):
            raise TableLookupError(f"word {word!r} not covered by the table")
        prior = table.prior.get(word, cfg.default_prior)
        pmis = _word_pmis(word, table, prior)
        raw = pmis[view]
        raw_by_word[word] = raw
        if cfg.normalizer == "max":
            norm = raw / max(pmis.values())
        else:
            norm = raw / (sum(pmis.values()) / len(pmis))
        if raw < 1.0 and norm < cfg.threshold:
            continue
        kept.append(word)
    if not kept and prompt.words:
        # never empty a non-empty prompt: keep the least contradictory word
        kept = [max(prompt.words, key=lambda w: raw_by_word.get(w, 1.0))]
    return Prompt(tuple(kept), prompt.protected & set(kept))


def render_view_prompt(view: str, prompt: Prompt) -> str:
    """"<view>, <words>" (view prompt without "of", prepended to the user
    prompt); degenerate empty prompt yields just "<view>,"."""
    if prompt.words:
        return f"{view}, {prompt.text()}"
    return f"{view},"
