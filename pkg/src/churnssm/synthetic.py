"""Ground-truth game-log generator.

Players are simulated one day at a time so that the segment assignment of
:func:`churnssm.ingestion.build_segment_panel` reproduces the intended daily
transition probabilities.  Active players log in every day.  Churn on day
``t`` is realised retroactively: the chosen player's logins on
``t - w .. t - 1`` are erased, so the last activity falls exactly ``w + 1``
days before ``t`` and the ingestion rule flags the player inactive on ``t``.
Only players who logged in on ``t - w - 1`` and made no purchase since can
be chosen; the selection probability is scaled by the ratio of the origin
population to that eligible subset so the expected rate is the target.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .ingestion import (
    DOW_NAMES,
    LOGIN,
    PURCHASE,
    CalendarEvent,
    EventLog,
    GameCalendar,
    MODELLED_SERIES,
    build_covariates,
    series_delay,
)
from .interventions import Intervention

logger = logging.getLogger(__name__)

RATE_KEYS = ("conversion_to_pu", "nonpu_churn", "pu_churn", "purchase_churn")
EXTRA_KEYS = ("return", "new_pu")
DEFAULT_BASELINE = {"conversion_to_pu": 0.01, "nonpu_churn": 0.03, "pu_churn": 0.01, "purchase_churn": 0.006,
                    "return": 0.005, "new_pu": 0.03}


class GenerationError(InputError):
    """Scenario cannot be simulated as configured."""


@dataclass
class TrueIntervention:
    """An injected campaign: a dated window with per-series effect sizes.

    Effects use the same scales as covariate effects: log scale for new
    users, probability scale for the rates.
    """

    name: str
    start_date: str
    end_date: str
    classification: str = "unknown"
    effects: dict = field(default_factory=dict)

    def as_intervention(self):
        shape = "pulse" if self.start_date == self.end_date else "window"
        return Intervention(self.name, self.start_date, self.end_date, shape=shape,
                            classification=self.classification)


def calendar_to_dict(cal: GameCalendar):
    return {"events": [{"type": e.type, "scale": int(e.scale), "start": str(e.start), "end": str(e.end)}
                       for e in cal.events],
            "national_holidays": sorted(str(d) for d in cal.national_holidays),
            "school_holidays": sorted(str(d) for d in cal.school_holidays)}


def calendar_from_dict(doc):
    events = [CalendarEvent(e["type"], int(e["scale"]), np.datetime64(e["start"], "D"), np.datetime64(e["end"], "D"))
              for e in doc.get("events", [])]
    return GameCalendar(events, {np.datetime64(d, "D") for d in doc.get("national_holidays", [])},
                        {np.datetime64(d, "D") for d in doc.get("school_holidays", [])})


@dataclass
class Scenario:
    horizon: int = 400
    start_date: str = "2015-01-01"
    initial_cohort: int = 2000
    seed: int = 0
    churn_window: int = 9
    purchase_churn_window: int = 50
    baseline: dict = field(default_factory=lambda: dict(DEFAULT_BASELINE))
    drift: dict = field(default_factory=dict)
    arrival_base: float = 60.0
    dow_multipliers: tuple = (1.0,) * 7
    arrival_drift: float = 0.0
    effects: dict = field(default_factory=dict)
    calendar: GameCalendar = field(default_factory=GameCalendar)
    interventions: list = field(default_factory=list)
    purchase_amounts: tuple = (0.99, 9.99)
    purchase_probs: tuple = (0.8, 0.2)

    @property
    def dates(self):
        return np.datetime64(self.start_date, "D") + np.arange(self.horizon)

    def to_dict(self):
        return {
            "horizon": self.horizon, "start_date": self.start_date, "initial_cohort": self.initial_cohort,
            "seed": self.seed, "churn_window": self.churn_window,
            "purchase_churn_window": self.purchase_churn_window,
            "baseline": dict(self.baseline), "drift": dict(self.drift),
            "arrivals": {"base": self.arrival_base, "dow_multipliers": list(self.dow_multipliers),
                         "drift": self.arrival_drift},
            "effects": {k: dict(v) for k, v in self.effects.items()},
            "calendar": calendar_to_dict(self.calendar),
            "interventions": [{"name": iv.name, "start_date": iv.start_date, "end_date": iv.end_date,
                               "classification": iv.classification, "effects": dict(iv.effects)}
                              for iv in self.interventions],
            "purchase_amounts": list(self.purchase_amounts), "purchase_probs": list(self.purchase_probs),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        known = {"horizon", "start_date", "initial_cohort", "seed", "churn_window", "purchase_churn_window",
                 "baseline", "drift", "arrivals", "effects", "calendar", "interventions", "purchase_amounts",
                 "purchase_probs"}
        unknown = set(doc) - known
        if unknown:
            raise GenerationError(f"unknown scenario fields {sorted(unknown)}")
        arrivals = doc.pop("arrivals", {})
        baseline = dict(DEFAULT_BASELINE)
        baseline.update(doc.pop("baseline", {}))
        try:
            return cls(
                baseline=baseline,
                arrival_base=float(arrivals.get("base", 60.0)),
                dow_multipliers=tuple(float(v) for v in arrivals.get("dow_multipliers", (1.0,) * 7)),
                arrival_drift=float(arrivals.get("drift", 0.0)),
                calendar=calendar_from_dict(doc.pop("calendar", {})),
                interventions=[TrueIntervention(**iv) for iv in doc.pop("interventions", [])],
                purchase_amounts=tuple(doc.pop("purchase_amounts", (0.99, 9.99))),
                purchase_probs=tuple(doc.pop("purchase_probs", (0.8, 0.2))),
                **doc,
            )
        except (TypeError, ValueError, KeyError) as exc:
            raise GenerationError(f"invalid scenario: {exc}") from None

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def load_scenario(path):
    with open(path) as fh:
        return Scenario.from_json(fh.read())


def _validate(sc: Scenario):
    if sc.horizon < 2:
        raise GenerationError("horizon must be at least 2 days")
    if sc.initial_cohort < 0 or not sc.arrival_base >= 0:
        raise GenerationError("cohort size and arrival rate must be non-negative")
    if sc.churn_window < 1 or sc.purchase_churn_window <= sc.churn_window:
        raise GenerationError("need 1 <= churn_window < purchase_churn_window")
    for key in RATE_KEYS + EXTRA_KEYS:
        v = sc.baseline.get(key)
        if v is None or not 0.0 <= float(v) <= 1.0:
            raise GenerationError(f"baseline probability {key}={v} outside [0, 1]")
    for key, v in sc.drift.items():
        if key not in RATE_KEYS or not float(v) >= 0:
            raise GenerationError(f"invalid drift entry {key}={v}")
    if len(sc.dow_multipliers) != 7 or min(sc.dow_multipliers) < 0:
        raise GenerationError("need seven non-negative day-of-week multipliers")
    amounts, probs = np.asarray(sc.purchase_amounts, float), np.asarray(sc.purchase_probs, float)
    if amounts.shape != (2,) or probs.shape != (2,) or np.any(amounts <= 0) or abs(probs.sum() - 1) > 1e-12 \
            or np.any(probs < 0):
        raise GenerationError("purchase amounts need a two-point distribution")
    names = {iv.name for iv in sc.interventions}
    if len(names) != len(sc.interventions):
        raise GenerationError("duplicate intervention names")
    for series, eff in list(sc.effects.items()) + [(s, {}) for iv in sc.interventions for s in iv.effects]:
        if series not in MODELLED_SERIES:
            raise GenerationError(f"effects target unknown series {series!r}")
    for iv in sc.interventions:
        try:
            iv.as_intervention()
        except InputError as exc:
            raise GenerationError(str(exc)) from None
        for v in iv.effects.values():
            if not math.isfinite(float(v)):
                raise GenerationError(f"non-finite effect in {iv.name}")


def _effect_paths(sc: Scenario, dates):
    """Per series, the summed covariate and intervention effects for each day."""
    ivs = [iv.as_intervention() for iv in sc.interventions]
    out = {}
    for series in MODELLED_SERIES:
        delay = series_delay(series, sc.churn_window, sc.purchase_churn_window)
        eff = np.zeros(dates.size)
        wanted = dict(sc.effects.get(series, {}))
        for iv in sc.interventions:
            if series in iv.effects:
                wanted[iv.name] = float(iv.effects[series])
        if wanted:
            cm = build_covariates(sc.calendar, dates, ivs, delay_days=delay)
            for name, beta in wanted.items():
                if name not in cm.names:
                    raise GenerationError(f"effect on {series} names unknown covariate {name!r}")
                eff += float(beta) * cm.column(name)
        out[series] = eff
    return out


class _Players:
    """Growable per-player state arrays."""

    def __init__(self, capacity):
        self.n = 0
        self.playing = np.zeros(capacity, bool)
        self.session_start = np.zeros(capacity, np.int64)
        self.last_purchase = np.full(capacity, -(2 ** 40), np.int64)
        self.churn_day = np.full(capacity, -1, np.int64)

    def add(self, count, day):
        need = self.n + count
        if need > self.playing.size:
            cap = max(need, 2 * self.playing.size)
            for name, fill in (("playing", False), ("session_start", 0), ("last_purchase", -(2 ** 40)),
                               ("churn_day", -1)):
                old = getattr(self, name)
                new = np.full(cap, fill, old.dtype)
                new[: self.n] = old[: self.n]
                setattr(self, name, new)
        idx = np.arange(self.n, need)
        self.playing[idx] = True
        self.session_start[idx] = day
        self.n = need
        return idx


def generate(scenario: Scenario):
    """Simulate ``scenario``; returns ``(EventLog, ground_truth_dict)``."""
    sc = scenario
    _validate(sc)
    n, w, P = sc.horizon, sc.churn_window, sc.purchase_churn_window
    dates = sc.dates
    effects = _effect_paths(sc, dates)
    rng = np.random.default_rng(sc.seed)

    clamped = {k: 0 for k in RATE_KEYS + ("new_users",)}
    short = {k: 0 for k in RATE_KEYS}

    def clip(key, values):
        bad = (values < 0) | (values > 1)
        clamped[key] += int(bad.sum())
        return np.clip(values, 0.0, 1.0)

    target = {}
    for key in RATE_KEYS:
        base = np.full(n, float(sc.baseline[key]))
        sd = float(sc.drift.get(key, 0.0))
        if sd > 0:
            base = np.clip(base + np.cumsum(np.r_[0.0, rng.normal(scale=sd, size=n - 1)]), 0.0, 1.0)
        target[key] = clip(key, base + effects[key])
    dow = (dates.astype(np.int64) + 3) % 7
    log_base = math.log(sc.arrival_base) if sc.arrival_base > 0 else -np.inf
    walk = np.cumsum(np.r_[0.0, rng.normal(scale=sc.arrival_drift, size=n - 1)]) if sc.arrival_drift > 0 else 0.0
    with np.errstate(divide="ignore"):
        arrival_rate = np.exp(log_base + walk + effects["new_users"]) * np.asarray(sc.dow_multipliers)[dow]
    p_return, p_new_pu = float(sc.baseline["return"]), float(sc.baseline["new_pu"])

    pl = _Players(max(16, sc.initial_cohort + int(arrival_rate.sum() * 1.2)))
    sessions = []      # (player array, start array, end array)
    buys_p, buys_d = [], []

    def purchase(idx, t):
        pl.last_purchase[idx] = t
        buys_p.append(idx)
        buys_d.append(np.full(idx.size, t, np.int64))

    def pick(candidates, expected, key):
        """Each candidate independently with probability expected/len, capped at one."""
        if candidates.size == 0 or expected <= 0:
            if expected > 0:
                short[key] += 1
            return candidates[:0]
        q = expected / candidates.size
        if q > 1:
            short[key] += 1
            q = 1.0
        return candidates[rng.random(candidates.size) < q]

    for t in range(n):
        m = pl.n
        playing = pl.playing[:m]
        lp = pl.last_purchase[:m]
        if t > 0:
            pu_prev = playing & (t - 1 - lp <= P)
            nonpu_prev = playing & ~pu_prev
            n_nonpu, n_pu = int(nonpu_prev.sum()), int(pu_prev.sum())
            settled = pl.session_start[:m] <= t - w - 1
            quiet = lp <= t - w - 1
            gone = []
            for key, mask, pop in (("nonpu_churn", nonpu_prev, n_nonpu), ("pu_churn", pu_prev, n_pu)):
                cand = np.flatnonzero(mask & settled & quiet)
                gone.append(pick(cand, target[key][t] * pop, key) if t >= w + 1 else cand[:0])
            gone = np.concatenate(gone)
            if gone.size:
                pl.playing[gone] = False
                pl.churn_day[gone] = t
                sessions.append((gone, pl.session_start[gone].copy(), np.full(gone.size, t - w - 1)))
            playing = pl.playing[:m]
            conv = pick(np.flatnonzero(nonpu_prev & playing), target["conversion_to_pu"][t] * n_nonpu,
                        "conversion_to_pu")
            lapsing = np.flatnonzero(pu_prev & playing & (lp == t - P - 1))
            revert = pick(lapsing, target["purchase_churn"][t] * n_pu, "purchase_churn") \
                if t >= P + 1 else lapsing[:0]
            renew = np.setdiff1d(lapsing, revert, assume_unique=True)
            if conv.size:
                purchase(conv, t)
            if renew.size:
                purchase(renew, t)
            away = np.flatnonzero(~playing & (pl.churn_day[:m] >= 0) & (pl.churn_day[:m] < t))
            back = away[rng.random(away.size) < p_return]
            if back.size:
                pl.playing[back] = True
                pl.session_start[back] = t
                pl.churn_day[back] = -1
        arrivals = int(rng.poisson(arrival_rate[t])) + (sc.initial_cohort if t == 0 else 0)
        if arrivals:
            new = pl.add(arrivals, t)
            payers = new[rng.random(new.size) < p_new_pu]
            if payers.size:
                purchase(payers, t)

    m = pl.n
    if m == 0:
        raise GenerationError("scenario produced no players")
    still = np.flatnonzero(pl.playing[:m])
    sessions.append((still, pl.session_start[still], np.full(still.size, n - 1)))
    sp = np.concatenate([s[0] for s in sessions])
    ss = np.concatenate([s[1] for s in sessions])
    se = np.concatenate([s[2] for s in sessions])
    length = se - ss + 1
    login_p = np.repeat(sp, length)
    offsets = np.arange(length.sum()) - np.repeat(np.cumsum(length) - length, length)
    login_d = np.repeat(ss, length) + offsets
    bp = np.concatenate(buys_p) if buys_p else np.zeros(0, np.int64)
    bd = np.concatenate(buys_d) if buys_d else np.zeros(0, np.int64)
    amounts = np.asarray(sc.purchase_amounts, float)[(rng.random(bp.size) >= sc.purchase_probs[0]).astype(int)]
    width = len(str(m - 1))
    ids = tuple(f"u{i:0{width}d}" for i in range(m))
    log = EventLog.from_arrays(
        ids, np.r_[login_p, bp], np.r_[login_d, bd],
        np.r_[np.full(login_p.size, LOGIN, np.int8), np.full(bp.size, PURCHASE, np.int8)],
        np.r_[np.zeros(login_p.size), amounts], dates[0], n)

    total = sum(clamped.values()) + sum(short.values())
    if total:
        logger.warning("scenario %s: %d probability clamps, %d infeasible selection days", sc.seed,
                       sum(clamped.values()), sum(short.values()))
    truth = {
        "seed": sc.seed,
        "start_date": str(dates[0]),
        "horizon": n,
        "rates": {k: target[k].tolist() for k in RATE_KEYS},
        "arrival_rate": arrival_rate.tolist(),
        "effects": {k: dict(v) for k, v in sc.effects.items()},
        "delays": {s: series_delay(s, w, P) for s in MODELLED_SERIES},
        "interventions": [{"name": iv.name, "start_date": iv.start_date, "end_date": iv.end_date,
                           "classification": iv.classification, "effects": dict(iv.effects)}
                          for iv in sc.interventions],
        "clamped": clamped,
        "infeasible_days": short,
        "n_players": m,
    }
    return log, truth


def truth_to_json(truth):
    return json.dumps(truth, indent=2, sort_keys=True)


def holiday_calendar(start_date, horizon, *, seed=0, holidays_per_year=15, events_per_month=2,
                     event_types=("Gacha", "Battle Event"), school_breaks=True):
    """A plausible calendar covering ``start_date - 60`` to the end of the horizon.

    National holidays are single days drawn once per calendar year; events
    run three to ten days.  The extra leading days give delayed covariates
    real values.
    """
    rng = np.random.default_rng(seed)
    first = np.datetime64(start_date, "D") - 60
    last = np.datetime64(start_date, "D") + horizon
    cal = GameCalendar()
    year = first.astype("datetime64[Y]")
    while year.astype("datetime64[D]") <= last:
        y0 = year.astype("datetime64[D]")
        days = int(((year + 1).astype("datetime64[D]") - y0).astype(int))
        for d in rng.choice(days, size=min(holidays_per_year, days), replace=False):
            cal.national_holidays.add(y0 + int(d))
        if school_breaks:
            for off, length in ((200, 40), (355, 10)):
                for d in range(length):
                    if off + d < days:
                        cal.school_holidays.add(y0 + off + d)
        year += 1
    month = first.astype("datetime64[M]")
    while month.astype("datetime64[D]") <= last:
        m0 = month.astype("datetime64[D]")
        for _ in range(events_per_month):
            s = m0 + int(rng.integers(0, 28))
            typ = event_types[int(rng.integers(len(event_types)))]
            cal.events.append(CalendarEvent(typ, int(rng.integers(0, 2)), s, s + int(rng.integers(2, 10))))
        month += 1
    return cal


__all__ = ["Scenario", "TrueIntervention", "GenerationError", "generate", "load_scenario", "holiday_calendar",
           "calendar_to_dict", "calendar_from_dict", "truth_to_json", "DOW_NAMES"]
