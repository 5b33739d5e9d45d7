"""
From raw player activity to daily segment series and covariate matrices.

Each player is, on each day, in exactly one of four states: not yet arrived,
non-paying active (non-PU), paying active (PU) or inactive.  A player is
active on day ``t`` when their last activity is at most ``churn_window`` days
old, and a PU when additionally their last purchase is at most
``purchase_churn_window`` days old.  A purchase counts as activity on its
day.  Transitions are read off consecutive days and rates divide a
transition count by the previous day's population of the origin segment.
"""
from __future__ import annotations

import csv
import datetime as _dt
import math
from dataclasses import dataclass, field

import numpy as np

from .builders import RegressionSpec
from .errors import InputError, ValidationError

LOGIN, PURCHASE = 0, 1
_KINDS = {"login": LOGIN, "purchase": PURCHASE}

EVENT_TYPES = ("Gigant Break", "Gift Event", "Gacha", "Duel Arena", "Battle Arena", "Battle Event",
               "Mission Event", "Mission Bingo", "Raid Event", "Raid Boss", "Item Collection", "Poll Event",
               "Call to Arms", "Raid Battle", "Adveniment")
DOW_NAMES = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")

POPULATIONS = ("non_pu", "pu", "inactive", "not_arrived")
TRANSITIONS = ("new_players", "new_to_nonpu", "new_to_pu", "remain_nonpu", "nonpu_to_pu", "nonpu_to_inactive",
               "pu_to_nonpu", "remain_pu", "pu_to_inactive", "churned_to_nonpu", "churned_to_pu",
               "remain_inactive")
RATES = ("conversion_to_pu", "nonpu_churn", "pu_churn", "purchase_churn")
MODELLED_SERIES = ("new_users", "conversion_to_pu", "nonpu_churn", "pu_churn", "purchase_churn")

# (previous state, current state) -> transition; states 0..3 as in the module docstring
_PAIR_NAMES = {(0, 1): "new_to_nonpu", (0, 2): "new_to_pu",
               (1, 1): "remain_nonpu", (1, 2): "nonpu_to_pu", (1, 3): "nonpu_to_inactive",
               (2, 1): "pu_to_nonpu", (2, 2): "remain_pu", (2, 3): "pu_to_inactive",
               (3, 1): "churned_to_nonpu", (3, 2): "churned_to_pu", (3, 3): "remain_inactive"}
# rate -> (transition, origin population)
_RATE_DEFS = {"conversion_to_pu": ("nonpu_to_pu", "non_pu"), "nonpu_churn": ("nonpu_to_inactive", "non_pu"),
              "pu_churn": ("pu_to_inactive", "pu"), "purchase_churn": ("pu_to_nonpu", "pu")}


def series_delay(name, churn_window=9, purchase_churn_window=50):
    """Covariate delay for a modelled series: churn transitions surface
    ``window + 1`` days after the behaviour that caused them."""
    if name in ("nonpu_churn", "pu_churn"):
        return churn_window + 1
    if name == "purchase_churn":
        return purchase_churn_window + 1
    if name in ("new_users", "conversion_to_pu"):
        return 0
    raise InputError(f"unknown series {name!r}")


def parse_date(text, where=""):
    try:
        return np.datetime64(_dt.date.fromisoformat(str(text).strip()), "D")
    except ValueError:
        raise InputError(f"{where}invalid ISO date {text!r}") from None


# ---------------------------------------------------------------- event log

@dataclass(frozen=True, eq=False)
class EventLog:
    """Validated player activity, one row per (player, day, kind[, amount]).

    ``day`` counts days from ``origin``; ``player`` indexes ``player_ids``.
    """

    player_ids: tuple
    player: np.ndarray
    day: np.ndarray
    kind: np.ndarray
    amount: np.ndarray
    origin: np.datetime64
    n_days: int

    def __len__(self):
        return self.player.size

    @property
    def n_players(self):
        return len(self.player_ids)

    @property
    def dates(self):
        return self.origin + np.arange(self.n_days)

    @classmethod
    def from_records(cls, records, start=None, end=None):
        """Build from ``(player_id, date, kind, amount)`` tuples.

        Duplicate logins of a player on one day collapse into one.  ``start``
        and ``end`` (inclusive) declare the study window; by default it spans
        the records.
        """
        rows = list(records)
        if not rows:
            raise InputError("event log is empty")
        ids, days, kinds, amounts = [], [], [], []
        for pid, date, kind, amount in rows:
            d = date if isinstance(date, np.datetime64) else parse_date(date)
            if kind not in _KINDS:
                raise InputError(f"unknown event kind {kind!r}")
            a = 0.0 if amount in (None, "") else float(amount)
            if not (math.isfinite(a) and a >= 0):
                raise InputError(f"invalid purchase amount {amount!r} for player {pid}")
            ids.append(str(pid))
            days.append(d.astype("datetime64[D]").astype(np.int64))
            kinds.append(_KINDS[kind])
            amounts.append(a)
        days = np.asarray(days, dtype=np.int64)
        lo = days.min() if start is None else np.datetime64(start, "D").astype(np.int64)
        hi = days.max() if end is None else np.datetime64(end, "D").astype(np.int64)
        if days.min() < lo or days.max() > hi:
            raise ValidationError("event dates fall outside the declared study window")
        uniq, player = np.unique(np.asarray(ids), return_inverse=True)
        return cls.from_arrays(tuple(uniq.tolist()), player, days - lo, np.asarray(kinds, dtype=np.int8),
                               np.asarray(amounts, dtype=float), np.datetime64(int(lo), "D"), int(hi - lo + 1))

    @classmethod
    def from_arrays(cls, player_ids, player, day, kind, amount, origin, n_days):
        """Vectorised constructor: validates, collapses duplicate logins, sorts."""
        player = np.asarray(player, dtype=np.int64)
        day = np.asarray(day, dtype=np.int64)
        kind = np.asarray(kind, dtype=np.int8)
        amount = np.asarray(amount, dtype=float)
        n_days = int(n_days)
        if not (player.shape == day.shape == kind.shape == amount.shape):
            raise InputError("event arrays differ in length")
        if player.size == 0:
            raise InputError("event log is empty")
        if day.min() < 0 or day.max() >= n_days:
            raise ValidationError("event dates fall outside the declared study window")
        if player.min() < 0 or player.max() >= len(player_ids):
            raise InputError("player index out of range")
        if not np.all(np.isin(kind, (LOGIN, PURCHASE))):
            raise InputError("unknown event kind")
        if not np.all(np.isfinite(amount) & (amount >= 0)):
            raise InputError("invalid purchase amount")
        login = kind == LOGIN
        key = player[login] * n_days + day[login]
        _, first = np.unique(key, return_index=True)
        keep = np.concatenate([np.flatnonzero(login)[first], np.flatnonzero(~login)])
        player, day, kind, amount = player[keep], day[keep], kind[keep], amount[keep]
        amount = np.where(kind == LOGIN, 0.0, amount)
        order = np.lexsort((amount, kind, player, day))
        log = cls(tuple(player_ids), player[order], day[order], kind[order], amount[order],
                  np.datetime64(origin, "D"), n_days)
        log._check_first_login()
        return log

    def _check_first_login(self):
        n = self.n_players
        first_login = np.full(n, np.iinfo(np.int64).max)
        login = self.kind == LOGIN
        np.minimum.at(first_login, self.player[login], self.day[login])
        buy = ~login
        bad = buy & (self.day < first_login[self.player])
        if bad.any():
            pid = self.player_ids[int(self.player[np.flatnonzero(bad)[0]])]
            raise ValidationError(f"player {pid} purchases before their first login")

    def records(self):
        for p, d, k, a in zip(self.player, self.day, self.kind, self.amount):
            yield (self.player_ids[p], str(self.origin + int(d)), "login" if k == LOGIN else "purchase",
                   None if k == LOGIN else float(a))


def load_event_log(path, start=None, end=None) -> EventLog:
    """Read a ``player_id,date,kind,amount`` CSV; errors name the line."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["player_id", "date", "kind", "amount"]:
            raise InputError(f"{path}: expected header player_id,date,kind,amount")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise InputError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            pid, date, kind, amount = (c.strip() for c in row)
            if not pid:
                raise InputError(f"{path}:{lineno}: empty player_id")
            d = parse_date(date, f"{path}:{lineno}: ")
            if kind not in _KINDS:
                raise InputError(f"{path}:{lineno}: unknown kind {kind!r}")
            if kind == "purchase":
                try:
                    a = float(amount)
                except ValueError:
                    raise InputError(f"{path}:{lineno}: invalid amount {amount!r}") from None
                if not (math.isfinite(a) and a >= 0):
                    raise InputError(f"{path}:{lineno}: invalid amount {amount!r}")
            elif amount:
                raise InputError(f"{path}:{lineno}: logins carry no amount")
            rows.append((pid, d, kind, amount or None))
    return EventLog.from_records(rows, start=start, end=end)


def write_event_log(log: EventLog, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["player_id", "date", "kind", "amount"])
        for pid, date, kind, amount in log.records():
            w.writerow([pid, date, kind, "" if amount is None else repr(amount)])


# ---------------------------------------------------------------- segment panel

@dataclass
class SegmentPanel:
    """Daily populations, transitions and rates.

    Rates are NaN on days where they are not evaluable: the first day, days
    whose origin population is empty, and the first ``window`` days of the
    churn series (activity before the log starts is unknown there).
    """

    dates: np.ndarray
    churn_window: int
    purchase_churn_window: int
    populations: dict
    transitions: dict
    rates: dict

    @property
    def n_days(self):
        return self.dates.size

    @property
    def new_users(self):
        return self.transitions["new_players"].astype(float)

    def evaluable_from(self, name):
        if name in ("nonpu_churn", "pu_churn"):
            return self.churn_window + 1
        if name == "purchase_churn":
            return self.purchase_churn_window + 1
        return 0 if name == "new_users" else 1

    def series(self, name, start=None):
        """A modelled series as floats, NaN before ``start`` (index or date)."""
        if name == "new_users":
            y = self.new_users.copy()
        elif name in self.rates:
            y = self.rates[name].copy()
        else:
            raise InputError(f"unknown series {name!r}")
        if start is not None:
            y[: self.index_of(start)] = np.nan
        return y

    def index_of(self, date):
        if isinstance(date, (int, np.integer)):
            return int(date)
        i = int((np.datetime64(date, "D") - self.dates[0]).astype(int))
        if not 0 <= i <= self.n_days:
            raise InputError(f"date {date} outside the panel")
        return i

    def columns(self):
        cols = {}
        cols.update({k: self.populations[k] for k in POPULATIONS})
        cols.update({k: self.transitions[k] for k in TRANSITIONS})
        cols.update({k: self.rates[k] for k in RATES})
        cols["new_users"] = self.transitions["new_players"]
        return cols

    def to_csv(self, path):
        cols = self.columns()
        names = list(cols)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date"] + names)
            for t in range(self.n_days):
                row = [str(self.dates[t])]
                for name in names:
                    v = cols[name][t]
                    if name in RATES:
                        row.append("" if np.isnan(v) else repr(float(v)))
                    else:
                        row.append(str(int(v)))
                w.writerow(row)

    @classmethod
    def from_csv(cls, path, churn_window=9, purchase_churn_window=50):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
        if not rows:
            raise InputError(f"{path}: empty panel")
        dates = np.array([parse_date(r["date"]) for r in rows])
        pops = {k: np.array([int(r[k]) for r in rows], dtype=np.int64) for k in POPULATIONS}
        trans = {k: np.array([int(r[k]) for r in rows], dtype=np.int64) for k in TRANSITIONS}
        rates = {k: np.array([float(r[k]) if r[k] != "" else np.nan for r in rows]) for k in RATES}
        return cls(dates, churn_window, purchase_churn_window, pops, trans, rates)


_NEVER = -(2 ** 40)


def _running_last(player, day, m, n_days):
    """Per player (rows) and day (columns): last event day so far, or _NEVER."""
    none = _NEVER
    out = np.full((m, n_days), none, dtype=np.int64)
    out[player, day] = day
    np.maximum.accumulate(out, axis=1, out=out)
    return out


def player_states(log: EventLog, churn_window=9, purchase_churn_window=50, players=None):
    """State matrix (players x days): 0 not arrived, 1 non-PU, 2 PU, 3 inactive."""
    lo, hi = (0, log.n_players) if players is None else players
    sel = (log.player >= lo) & (log.player < hi)
    p, d, k = log.player[sel] - lo, log.day[sel], log.kind[sel]
    m, n = hi - lo, log.n_days
    act = _running_last(p, d, m, n)
    buy = _running_last(p[k == PURCHASE], d[k == PURCHASE], m, n)
    t = np.arange(n)
    arrived = act > _NEVER
    inactive = arrived & (t - act > churn_window)
    pu = arrived & ~inactive & (t - buy <= purchase_churn_window)
    return (arrived.astype(np.int8) + pu + 2 * inactive).astype(np.int8)


def build_segment_panel(log: EventLog, churn_window=9, purchase_churn_window=50, chunk=2048) -> SegmentPanel:
    if churn_window < 1 or purchase_churn_window < 1:
        raise InputError("windows must be at least one day")
    n = log.n_days
    counts = np.zeros((16, n), dtype=np.int64)
    pops = np.zeros((4, n), dtype=np.int64)
    t = np.arange(n)
    for lo in range(0, log.n_players, chunk):
        hi = min(lo + chunk, log.n_players)
        state = player_states(log, churn_window, purchase_churn_window, (lo, hi))
        prev = np.concatenate([np.zeros((hi - lo, 1), dtype=np.int8), state[:, :-1]], axis=1)
        code = prev.astype(np.int64) * 4 + state
        counts += np.bincount((code * n + t).ravel(), minlength=16 * n).reshape(16, n)
        pops += np.bincount((state.astype(np.int64) * n + t).ravel(), minlength=4 * n).reshape(4, n)
    unexpected = [(a, b) for a in range(4) for b in range(4)
                  if (a, b) not in _PAIR_NAMES and (a, b) != (0, 0) and counts[a * 4 + b].any()]
    if unexpected:  # pragma: no cover - guards the state machine
        raise AssertionError(f"impossible transitions {unexpected}")
    transitions = {name: counts[a * 4 + b].copy() for (a, b), name in _PAIR_NAMES.items()}
    transitions["new_players"] = transitions["new_to_nonpu"] + transitions["new_to_pu"]
    populations = {"not_arrived": pops[0], "non_pu": pops[1], "pu": pops[2], "inactive": pops[3]}
    panel = SegmentPanel(log.dates, churn_window, purchase_churn_window, populations,
                         {k: transitions[k] for k in TRANSITIONS}, {})
    panel.rates = {name: _rate(panel, name) for name in RATES}
    return panel


def _rate(panel, name):
    trans, origin = _RATE_DEFS[name]
    num = panel.transitions[trans].astype(float)
    den = np.r_[0, panel.populations[origin][:-1]].astype(float)
    out = np.full(panel.n_days, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    out[: panel.evaluable_from(name)] = np.nan
    return out


# ---------------------------------------------------------------- churn window calibration

@dataclass(frozen=True)
class CalibrationRow:
    window: int
    flagged: int
    false_churners: int
    false_churner_fraction: float
    missed_sales: float
    missed_sales_fraction: float
    qualifies: bool


class CalibrationError(InputError):
    def __init__(self, message, table):
        super().__init__(message)
        self.table = table


def _calibration_row(days_by_player, buys_by_player, total, w, span):
    flagged = false = 0
    missed = 0.0
    for days, (bdays, bamt) in zip(days_by_player, buys_by_player):
        if days.size == 0:
            continue
        gaps = np.diff(days)
        ret = np.flatnonzero(gaps >= w + 2)
        if ret.size:
            flagged += 1
            false += 1
            flag_day = days[ret[0]] + w + 1
            missed += float(bamt[bdays > flag_day].sum())
        elif days[-1] + w + 1 <= span - 1:
            flagged += 1
    ffrac = false / flagged if flagged else 0.0
    mfrac = missed / total if total > 0 else 0.0
    return flagged, false, ffrac, missed, mfrac


def calibrate_churn_window(log: EventLog, candidate_windows, max_false_churners=0.10, max_missed_sales=0.015,
                           calibration_span=None, purchase_mode=False):
    """Smallest candidate window whose false-churner and missed-sales
    fractions over the first ``calibration_span`` days stay within bounds.

    A player is flagged when more than ``w`` consecutive days pass without
    activity inside the span; a false churner is a flagged player who comes
    back, and missed sales are their purchases after the first flag.  With
    ``purchase_mode`` the same rule runs on purchase days instead (gaps in
    spending rather than in logins).  Returns ``(window, table)``.
    """
    span = log.n_days if calibration_span is None else int(calibration_span)
    if span < 1:
        raise InputError("calibration span must be positive")
    windows = sorted({int(w) for w in candidate_windows})
    if not windows or windows[0] < 1:
        raise InputError("candidate windows must be positive")
    in_span = log.day < span
    if not np.any(in_span & (log.kind == LOGIN)):
        raise InputError("calibration span contains no logins")
    p, d, k, a = log.player[in_span], log.day[in_span], log.kind[in_span], log.amount[in_span]
    buy = k == PURCHASE
    total = float(a[buy].sum())
    base = buy if purchase_mode else np.ones_like(buy)
    days_by_player, buys_by_player = [], []
    order = np.argsort(p, kind="stable")
    bounds = np.searchsorted(p[order], np.arange(log.n_players + 1))
    for i in range(log.n_players):
        idx = order[bounds[i]:bounds[i + 1]]
        days_by_player.append(np.unique(d[idx][base[idx]]))
        b = idx[buy[idx]]
        buys_by_player.append((d[b], a[b]))
    table = []
    for w in windows:
        flagged, false, ffrac, missed, mfrac = _calibration_row(days_by_player, buys_by_player, total, w, span)
        ok = ffrac < max_false_churners and mfrac < max_missed_sales
        table.append(CalibrationRow(w, flagged, false, ffrac, missed, mfrac, ok))
    for row in table:
        if row.qualifies:
            return row.window, table
    detail = "; ".join(f"w={r.window}: false churners {r.false_churner_fraction:.4f}, "
                       f"missed sales {r.missed_sales_fraction:.4f}" for r in table)
    raise CalibrationError(f"no candidate window qualifies ({detail})", table)


# ---------------------------------------------------------------- calendar and covariates

@dataclass(frozen=True)
class CalendarEvent:
    type: str
    scale: int
    start: np.datetime64
    end: np.datetime64

    def __post_init__(self):
        if self.type not in EVENT_TYPES:
            raise ValidationError(f"unknown event type {self.type!r}")
        if int(self.scale) not in range(5):
            raise ValidationError(f"event scale {self.scale} outside 0..4")
        if self.start > self.end:
            raise ValidationError(f"event {self.type} starts after it ends")


@dataclass
class GameCalendar:
    events: list = field(default_factory=list)
    national_holidays: set = field(default_factory=set)
    school_holidays: set = field(default_factory=set)

    def rows(self):
        out = [("event", e.type, str(e.scale), str(e.start), str(e.end)) for e in self.events]
        for kind, days in (("national_holiday", self.national_holidays), ("school_holiday", self.school_holidays)):
            out += [(kind, "", "", str(d), str(d)) for d in sorted(days)]
        return out


def load_calendar(path) -> GameCalendar:
    cal = GameCalendar()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["record", "type", "scale", "start_date", "end_date"]:
            raise InputError(f"{path}: expected header record,type,scale,start_date,end_date")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise InputError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            record, typ, scale, start, end = (c.strip() for c in row)
            where = f"{path}:{lineno}: "
            s, e = parse_date(start, where), parse_date(end, where)
            if record == "event":
                try:
                    sc = int(scale)
                except ValueError:
                    raise InputError(f"{where}invalid scale {scale!r}") from None
                try:
                    cal.events.append(CalendarEvent(typ, sc, s, e))
                except ValidationError as exc:
                    raise ValidationError(f"{where}{exc}") from None
            elif record in ("national_holiday", "school_holiday"):
                target = cal.national_holidays if record == "national_holiday" else cal.school_holidays
                for day in np.arange(s, e + 1):
                    target.add(day)
            else:
                raise InputError(f"{where}unknown record {record!r}")
    return cal


def write_calendar(calendar: GameCalendar, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record", "type", "scale", "start_date", "end_date"])
        w.writerows(calendar.rows())


def event_slug(event_type):
    return event_type.lower().replace(" ", "_")


@dataclass(frozen=True, eq=False)
class CovariateMatrix:
    """Named covariate columns on a date index, already shifted by ``delay_days``.

    ``groups`` maps each column to its selection group.
    """

    dates: np.ndarray
    names: tuple
    values: np.ndarray
    groups: dict
    delay_days: int = 0

    def column(self, name):
        return self.values[:, self.names.index(name)]

    def group_members(self, group):
        return [n for n in self.names if self.groups[n] == group]

    def subset(self, names):
        idx = [self.names.index(n) for n in names]
        return CovariateMatrix(self.dates, tuple(names), self.values[:, idx],
                               {n: self.groups[n] for n in names}, self.delay_days)

    def to_regression(self, names=None, stop=None) -> RegressionSpec:
        """Regression inputs; the delay is already applied, so the spec carries none."""
        cm = self if names is None else self.subset(names)
        return RegressionSpec(cm.names, cm.values[:stop], delay_days=0)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date"] + list(self.names))
            for t in range(self.dates.size):
                w.writerow([str(self.dates[t])] + [repr(float(v)) if v != int(v) else str(int(v))
                                                   for v in self.values[t]])


def _undelayed_columns(calendar, dates, interventions):
    n = dates.size
    cols, groups = {}, {}

    def add(name, values, group):
        cols[name] = np.asarray(values, dtype=float)
        groups[name] = group

    dow = (dates.astype("datetime64[D]").astype(np.int64) + 3) % 7  # 1970-01-01 was a Thursday
    for i, nm in enumerate(DOW_NAMES):
        add(f"dow_{nm}", dow == i, "day_of_week")
    month = dates.astype("datetime64[M]")
    year = dates.astype("datetime64[Y]")
    add("first_of_month", dates == month.astype("datetime64[D]"), "calendar")
    add("last_of_month", dates == (month + 1).astype("datetime64[D]") - 1, "calendar")
    add("first_of_year", dates == year.astype("datetime64[D]"), "calendar")
    add("last_of_year", dates == (year + 1).astype("datetime64[D]") - 1, "calendar")
    add("national_holiday", np.isin(dates, np.array(sorted(calendar.national_holidays), dtype="datetime64[D]")),
        "holidays")
    add("school_holiday", np.isin(dates, np.array(sorted(calendar.school_holidays), dtype="datetime64[D]")),
        "holidays")
    pairs = sorted({(e.type, int(e.scale)) for e in calendar.events},
                   key=lambda p: (EVENT_TYPES.index(p[0]), p[1]))
    running = np.zeros(n)
    starting = np.zeros(n)
    for typ, scale in pairs:
        on = np.zeros(n, dtype=bool)
        st = np.zeros(n, dtype=bool)
        for e in calendar.events:
            if e.type == typ and int(e.scale) == scale:
                on |= (dates >= e.start) & (dates <= e.end)
                st |= dates == e.start
        base = f"event_{event_slug(typ)}_{scale}"
        add(f"{base}_on", on, "ingame_events")
        add(f"{base}_start", st, "ingame_events")
    for e in calendar.events:
        running += (dates >= e.start) & (dates <= e.end)
        starting += dates == e.start
    add("events_running", running, "event_counts")
    add("events_starting", starting, "event_counts")
    for iv in interventions or ():
        cls = getattr(iv, "classification", "unknown")
        group = f"interventions_{cls if cls in ('marketing', 'promotion') else 'unknown'}"
        start = np.datetime64(iv.start_date, "D")
        end = np.datetime64(iv.end_date, "D")
        add(iv.name, (dates >= start) & (dates <= end), group)
    return cols, groups


def build_covariates(calendar: GameCalendar, dates, interventions=(), delay_days=0) -> CovariateMatrix:
    """All covariate columns for ``dates``, delayed by ``delay_days``.

    The value in row ``t`` is the undelayed covariate ``delay_days`` earlier,
    computed from the calendar rather than zero-filled, so the calendar must
    cover the shifted range.
    """
    dates = np.asarray(dates, dtype="datetime64[D]")
    delay = int(delay_days)
    if delay < 0:
        raise InputError("delay_days must be non-negative")
    cols, groups = _undelayed_columns(calendar, dates - delay, interventions)
    names = tuple(cols)
    values = np.column_stack([cols[nm] for nm in names]) if names else np.zeros((dates.size, 0))
    return CovariateMatrix(dates, names, values, groups, delay)
