import os
import socket
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pxamr.gid import Gid, root_gid
from pxamr.lco import FutureCell
from pxamr.locality import Locality, TypeTagMismatch
from pxamr.parcel import (HEADER_SIZE, MAGIC, ActionTable, BadMagic, FrameDecoder, Parcel,
                          TruncatedFrame, UnknownAction, decode, encode)
from pxamr.serialization import CodecError, RemoteError, decode_args, encode_args
from pxamr.transport import AddressInUse, ParcelPort, TransportError

gids = st.builds(Gid, st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
parcels = st.builds(Parcel, gids, st.integers(0, 2**32 - 1), st.binary(max_size=512), gids,
                    st.integers(0, 2**32 - 1))


def test_header_layout_is_bit_exact():
    p = Parcel(Gid(0x0102030405060708, 0x1112131415161718), 0x21222324, b"xyz",
               Gid(0x3132333435363738, 0x4142434445464748), 0x51525354)
    f = encode(p)
    assert f[:4] == MAGIC == b"PXP1"
    assert int.from_bytes(f[4:8], "little") == len(f) - 8 == 44 + 3
    assert f[8:16] == bytes(range(8, 0, -1))
    assert f[16:24] == bytes(range(0x18, 0x10, -1))
    assert f[24:28] == bytes([0x24, 0x23, 0x22, 0x21])
    assert int.from_bytes(f[28:36], "little") == 0x3132333435363738
    assert int.from_bytes(f[36:44], "little") == 0x4142434445464748
    assert int.from_bytes(f[44:48], "little") == 0x51525354
    assert int.from_bytes(f[48:52], "little") == 3
    assert f[52:] == b"xyz" and HEADER_SIZE == 52


def test_roundtrip_empty_and_large():
    p = Parcel(Gid(1, 2), 9)
    assert decode(encode(p)) == p
    big = Parcel(Gid(5, 6), 17, os.urandom(1 << 20), Gid(7, 8), 3)
    assert decode(encode(big)) == big


@settings(max_examples=200)
@given(parcels)
def test_roundtrip_property(p):
    assert decode(encode(p)) == p


def test_decode_errors():
    f = bytearray(encode(Parcel(Gid(1, 1), 3, b"abc")))
    with pytest.raises(TruncatedFrame):
        decode(bytes(f[:-1]))
    with pytest.raises(TruncatedFrame):
        decode(bytes(f[:3]))
    bad = bytes(b"PXQ1" + f[4:])
    with pytest.raises(BadMagic):
        decode(bad)
    t = ActionTable()
    t.register(3, "x", "", lambda *a: None)
    assert decode(bytes(f), t).action_id == 3
    f2 = encode(Parcel(Gid(1, 1), 99))
    with pytest.raises(UnknownAction):
        decode(f2, t)


@settings(max_examples=50)
@given(st.lists(parcels, max_size=8), st.lists(st.integers(1, 64), min_size=1, max_size=30))
def test_concatenated_frames_self_delimit(ps, cuts):
    stream = b"".join(encode(p) for p in ps)
    dec = FrameDecoder()
    out, pos, k = [], 0, 0
    while pos < len(stream):
        n = cuts[k % len(cuts)]
        out += dec.feed(stream[pos:pos + n])
        pos += n
        k += 1
    assert out == ps and dec.pending == 0


def test_action_table_rules():
    t = ActionTable()
    t.register(40, "a", "id", lambda *a: None)
    with pytest.raises(ValueError):
        t.register(40, "b", "", lambda *a: None)
    with pytest.raises(ValueError):
        t.register(41, "c", "Z", lambda *a: None)
    with pytest.raises(UnknownAction):
        t[77]
    h1 = t.table_hash()
    t.register(42, "d", "", lambda *a: None)
    assert t.table_hash() != h1


finite = st.floats(allow_nan=False)


@settings(max_examples=100)
@given(st.integers(-2**63, 2**63 - 1), st.integers(0, 2**32 - 1), finite, st.booleans(),
       gids, st.text(max_size=40), st.binary(max_size=40),
       st.lists(finite, max_size=20))
def test_argument_schema_roundtrip(i, u, d, flag, g, s, b, arr):
    a = np.array(arr, dtype=float)
    value = [1, 2.5, "x", b"y", None, True, [g, a]]
    out = decode_args("iIuId?gsbav", encode_args("iIuId?gsbav",
                                                 (i, u, u, u, d, flag, g, s, b, a, value)))
    assert out[:9] == (i, u, u, u, d, flag, g, s, b)
    assert np.array_equal(out[9], a)
    assert out[10][:6] == value[:6]
    assert out[10][6][0] == g and np.array_equal(out[10][6][1], a)


def test_schema_rejects_bad_values_and_trailing_bytes():
    with pytest.raises(CodecError):
        encode_args("I", (-1,))
    with pytest.raises(CodecError):
        decode_args("I", b"\x00" * 5)
    with pytest.raises(CodecError):
        encode_args("v", (object(),))


def test_errors_roundtrip_by_type():
    (kind,) = decode_args("v", encode_args("v", (KeyError("k"),)))
    assert isinstance(kind, KeyError)

    class Odd(Exception):
        pass

    (rem,) = decode_args("v", encode_args("v", (Odd("strange"),)))
    assert isinstance(rem, RemoteError) and rem.kind == "Odd"


# transport ---------------------------------------------------------------------

def test_port_conflict_is_reported():
    a = ParcelPort(lambda p, c: None)
    ep = a.listen()
    b = ParcelPort(lambda p, c: None)
    host, port = ep.split(":")
    with pytest.raises(AddressInUse):
        b.listen(host, int(port))
    a.close()


def test_unreachable_endpoint_is_an_error():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    p = ParcelPort(lambda *a: None)
    with pytest.raises(TransportError):
        p.send(Parcel(Gid(1, 1), 1), endpoint=f"127.0.0.1:{port}")


def test_unreachable_locality_fails_the_future(pair):
    a, _ = pair
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    a.agas_server.register_locality(5, f"127.0.0.1:{port}", a.actions.table_hash())
    from pxamr.bench import ACTION_SPIN

    with pytest.raises(TransportError):
        a.async_action(root_gid(5), ACTION_SPIN, 0.0).get(10)


def test_16384_parcels_to_two_peers(standalone):
    _server, (src, p1, p2) = standalone
    from pxamr.bench import ACTION_SPIN

    before = p1.port.received + p2.port.received
    cells = [src.async_action(root_gid(1 + k % 2), ACTION_SPIN, 0.0) for k in range(16384)]
    for c in cells:
        c.get(60)
    assert p1.port.received + p2.port.received - before == 16384


# dispatch ----------------------------------------------------------------------

CALC_TYPE = 50
ADD = 60
BOOM = 61


class Calculator:
    def add(self, x, y):
        return x + y


def calc_actions(t):
    t.register(ADD, "calc.add", "ii", lambda loc, c, x, y: c.add(x, y), type_tag=CALC_TYPE)
    t.register(BOOM, "calc.boom", "", lambda loc, c: 1 / 0, type_tag=CALC_TYPE)


@pytest.fixture
def trio():
    a = Locality(0, workers=2, host_agas=True, extra_actions=calc_actions).start()
    b = Locality(1, workers=2, agas=a.endpoint, extra_actions=calc_actions).start()
    c = Locality(2, workers=2, agas=a.endpoint, extra_actions=calc_actions).start()
    yield a, b, c
    for loc in (c, b, a):
        loc.stop()


def test_calculator_add_over_the_wire(trio):
    a, b, _ = trio
    gid = b.run(b.new_component, Calculator(), CALC_TYPE, timeout=5)
    assert a.async_action(gid, ADD, 2, 3).get(5) == 5
    assert b.async_action(gid, ADD, 2, 3).get(5) == 5
    with pytest.raises(ZeroDivisionError):
        a.async_action(gid, BOOM).get(5)
    with pytest.raises(TypeTagMismatch):
        a.async_action(b.root, ADD, 1, 1).get(5)


def test_misrouted_parcel_is_forwarded_once(trio):
    a, b, c = trio
    gid = c.run(c.new_component, Calculator(), CALC_TYPE, timeout=5)
    cell = FutureCell()
    # send straight to locality 1, which does not hold the object
    a._invoke_at(1, gid, a.actions[ADD], (20, 22), cell)
    assert cell.get(5) == 42
    assert b.forwarded == 1 and c.forwarded == 0


def test_forwarded_parcel_is_not_forwarded_again(trio):
    a, b, c = trio
    gid = c.run(c.new_component, Calculator(), CALC_TYPE, timeout=5)
    cell = FutureCell()
    from pxamr.parcel import FORWARDED_BIT

    cont = a.export(cell)
    a._send_to(1, Parcel(gid, ADD | FORWARDED_BIT, encode_args("ii", (1, 2)), cont, 0))
    with pytest.raises(Exception, match="not bound"):
        cell.get(5)
    assert b.forwarded == 0


def test_unregistered_action_reaches_sender_continuation(trio):
    a, b, _ = trio
    cell = FutureCell()
    cont = a.export(cell)
    a._send_to(1, Parcel(b.root, 999, b"", cont, 0))
    with pytest.raises(UnknownAction):
        cell.get(5)
    with pytest.raises(UnknownAction):
        a.async_action(b.root, 999).get(5)


def test_handlers_do_not_run_on_the_receive_thread(trio):
    a, b, _ = trio
    seen = []

    class Probe(Calculator):
        def add(self, x, y):
            seen.append(threading.current_thread().name)
            return x + y

    gid = b.run(b.new_component, Probe(), CALC_TYPE, timeout=5)
    assert a.async_action(gid, ADD, 0, 0).get(5) == 0
    assert seen and "recv" not in seen[0]


def test_handshake_rejects_a_different_action_table(trio):
    a, _, _ = trio
    bad = Locality(7, workers=1, agas=a.endpoint)
    with pytest.raises(Exception, match="action table"):
        bad.start(5)
    bad.stop()


def test_loopback_send_skips_the_network(trio):
    a, _, _ = trio
    gid = a.run(a.new_component, Calculator(), CALC_TYPE, timeout=5)
    sent = a.port.sent
    assert a.async_action(gid, ADD, 1, 1).get(5) == 2
    assert a.port.sent == sent


def test_continuation_totality_under_load(trio):
    a, b, c = trio
    gid_b = b.run(b.new_component, Calculator(), CALC_TYPE, timeout=5)
    gid_c = c.run(c.new_component, Calculator(), CALC_TYPE, timeout=5)
    cells = [a.async_action(gid_b if k % 2 else gid_c, ADD if k % 5 else BOOM, k, 1)
             for k in range(400)]
    deadline = time.monotonic() + 30
    while not all(x.done() for x in cells):
        assert time.monotonic() < deadline
        time.sleep(0.01)
    assert all((x.failed() if k % 5 == 0 else x.result() == k + 1) for k, x in enumerate(cells))
