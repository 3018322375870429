"""Deterministic discrete-event core.

Time is an integer number of picoseconds. Events at equal timestamps run in
insertion order. Processes are generators that yield either a delay (int) or
an :class:`Event` to wait on.
"""
from __future__ import annotations

import heapq
from itertools import count

PS_PER_NS = 1000
PS_PER_US = 1_000_000
PS_PER_S = 1_000_000_000_000


def ns(x: float) -> int:
    return int(round(x * PS_PER_NS))


def to_us(ps: int) -> float:
    return ps / PS_PER_US


def ser_ps(n_bytes: float, rate_bps: float) -> int:
    return int(round(n_bytes * 8 * PS_PER_S / rate_bps))


class EventQueue:
    def __init__(self):
        self._heap = []
        self._seq = count()

    def push(self, t: int, fn, args=()):
        heapq.heappush(self._heap, (t, next(self._seq), fn, args))

    def pop(self):
        t, _, fn, args = heapq.heappop(self._heap)
        return t, fn, args

    def peek_time(self):
        return self._heap[0][0] if self._heap else None

    def __len__(self):
        return len(self._heap)


class Event:
    __slots__ = ("sim", "callbacks", "triggered", "value")

    def __init__(self, sim: "Simulator"):
        self.sim = sim
        self.callbacks = []
        self.triggered = False
        self.value = None

    def succeed(self, value=None):
        if self.triggered:
            raise RuntimeError("event already triggered")
        self.triggered = True
        self.value = value
        cbs, self.callbacks = self.callbacks, None
        for cb in cbs:
            self.sim.schedule(0, cb, self)
        return self

    def add_callback(self, cb):
        if self.triggered:
            self.sim.schedule(0, cb, self)
        else:
            self.callbacks.append(cb)


class Process(Event):
    __slots__ = ("gen", "name")

    def __init__(self, sim: "Simulator", gen, name: str = ""):
        super().__init__(sim)
        self.gen = gen
        self.name = name
        sim.schedule(0, self._step, None)

    def _wake(self, ev: Event):
        self._step(ev.value)

    def _step(self, value):
        try:
            target = self.gen.send(value)
        except StopIteration as stop:
            self.succeed(stop.value)
            return
        if isinstance(target, int):
            self.sim.schedule(target, self._step, None)
        elif isinstance(target, Event):
            target.add_callback(self._wake)
        else:
            raise TypeError(f"process {self.name!r} yielded {target!r}")


class Simulator:
    def __init__(self):
        self.now = 0
        self.queue = EventQueue()
        self.dispatched = 0

    def schedule(self, delay: int, fn, *args):
        if delay < 0:
            raise ValueError("negative delay")
        self.queue.push(self.now + delay, fn, args)

    def at(self, t: int, fn, *args):
        if t < self.now:
            raise ValueError(f"cannot schedule in the past ({t} < {self.now})")
        self.queue.push(t, fn, args)

    def event(self) -> Event:
        return Event(self)

    def timeout(self, delay: int, value=None) -> Event:
        ev = Event(self)
        self.schedule(delay, ev.succeed, value)
        return ev

    def process(self, gen, name: str = "") -> Process:
        return Process(self, gen, name)

    def all_of(self, events) -> Event:
        events = list(events)
        done = Event(self)
        remaining = [len(events)]
        if not events:
            done.succeed([])
            return done

        def hit(_):
            remaining[0] -= 1
            if remaining[0] == 0:
                done.succeed([e.value for e in events])

        for e in events:
            e.add_callback(hit)
        return done

    def run(self, until: int | None = None) -> int:
        q = self.queue
        n = 0
        while len(q):
            t = q.peek_time()
            if until is not None and t > until:
                break
            t, fn, args = q.pop()
            self.now = t
            fn(*args)
            n += 1
        if until is not None and until > self.now:
            self.now = until
        self.dispatched += n
        return n
