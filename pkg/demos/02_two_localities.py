"""Two localities talking through parcels.

Locality 0 hosts the address server.  Locality 1 registers an object under a
symbolic name; locality 0 looks the name up and invokes an action on it.  The
call travels as a framed parcel over localhost TCP and the result comes back
as a continuation that writes a future.

    python demos/02_two_localities.py
"""

from pxamr import Locality

COUNTER_TYPE = 50
BUMP = 60


class Counter:
    def __init__(self):
        self.value = 0

    def bump(self, by):
        self.value += by
        return self.value


def actions(table):
    # both processes must register the same table or the handshake fails
    table.register(BUMP, "counter.bump", "i", lambda loc, obj, by: obj.bump(by),
                   type_tag=COUNTER_TYPE)


with Locality(0, workers=2, host_agas=True, extra_actions=actions).start() as home:
    with Locality(1, workers=2, agas=home.endpoint, extra_actions=actions).start() as away:
        gid = away.run(away.new_component, Counter(), COUNTER_TYPE, timeout=5)
        away.agas.register_symbol("demo/counter", gid).get(5)
        print("registered", gid, "on locality", gid.locality)

        found = home.agas.lookup_symbol("demo/counter").get(5)
        for by in (1, 2, 3):
            print("bump", by, "->", home.async_action(found, BUMP, by).get(5))
        print("parcels sent by locality 0:", home.port.sent)
        print("address server calls:", dict(home.agas_server.counters))
