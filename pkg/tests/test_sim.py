from exanet.sim import Simulator, ns, ser_ps


def test_units():
    assert ns(1.5) == 1500
    assert ser_ps(256, 16e9) == 128_000
    assert ser_ps(1, 8e9) == 1000


def test_same_time_events_run_in_insertion_order():
    sim = Simulator()
    out = []
    for i in range(5):
        sim.schedule(10, out.append, i)
    sim.run()
    assert out == [0, 1, 2, 3, 4] and sim.now == 10


def test_processes_and_events():
    sim = Simulator()
    log = []

    def waiter(ev):
        v = yield ev
        log.append((sim.now, v))

    def producer(ev):
        yield 500
        ev.succeed("hi")
        return 7

    ev = sim.event()
    sim.process(waiter(ev))
    p = sim.process(producer(ev))
    sim.run()
    assert log == [(500, "hi")] and p.value == 7


def test_all_of_and_timeout():
    sim = Simulator()
    done = sim.all_of([sim.timeout(30, "a"), sim.timeout(10, "b")])
    sim.run()
    assert done.triggered and done.value == ["a", "b"] and sim.now == 30
    assert sim.all_of([]).triggered


def test_run_until_stops_early():
    sim = Simulator()
    out = []
    sim.schedule(100, out.append, 1)
    sim.run(until=50)
    assert out == [] and sim.now == 50
    sim.run()
    assert out == [1]
