import os
import random
import string

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import guest_state, small_config
from ctr import ctrlib
from ctr.agent import ProcessImage
from ctr.agent.process import TAGS
from ctr.ctrlib import image as img
from ctr.enclave import core
from ctr.enclave.core import ThreadState
from ctr.enclave.programs import FN_RUN, FN_RUN_BOUNDED, counter_program, mixing_ocall, random_program
from ctr.enclave.vm import FN_PLACEHOLDER
from ctr.errors import AuthenticationFailed, MalformedImage, MeasurementMismatch
from ctr.host import StagedEnclave, decode_staged, encode_staged, model, should_park
from ctr.mks import protocol

seeds = st.integers(0, 2**32 - 1)
fast = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])


def run_traced(e, tid, n):
    trace = []
    core.step_guest(e, tid, n, mixing_ocall, lambda t, a, v: trace.append((a, v)))
    return trace


# -- execution ------------------------------------------------------------------


@fast
@given(seed=seeds, cuts=st.lists(st.integers(0, 400), min_size=1, max_size=5), tail=st.integers(0, 400))
def test_aex_is_transparent_to_the_guest(seed, cuts, tail):
    program = random_program(random.Random(seed))
    straight = core.create_enclave(program, small_config(max_threads=1))
    core.ecall(straight, FN_RUN, thread_id=0)
    expected = run_traced(straight, 0, sum(cuts) + tail)

    split = core.create_enclave(program, small_config(max_threads=1))
    core.ecall(split, FN_RUN, thread_id=0)
    trace = []
    for n in cuts:
        trace += run_traced(split, 0, n)
        core.interrupt_thread(split, 0)
        core.eresume(split, 0)
    trace += run_traced(split, 0, tail)
    assert trace == expected
    assert guest_state(split, 0) == guest_state(straight, 0)


ops = st.lists(st.tuples(st.sampled_from(["enter", "aex", "resume", "finish"]), st.integers(0, 1)), max_size=30)


@settings(max_examples=200, deadline=None)
@given(ops=ops, bound=st.integers(1, 5))
def test_inferred_cssa_tracks_hardware(ops, bound):
    depth = 3
    e = core.create_enclave(counter_program(), small_config(ssa_depth=depth))
    for op, tid in ops:
        tcs = e.tcs[tid]
        if op == "enter" and tcs.state != ThreadState.IN_ENCLAVE and tcs.cssa < depth:
            core.ecall(e, FN_RUN_BOUNDED, (bound,), thread_id=tid)
        elif op == "aex" and tcs.state == ThreadState.IN_ENCLAVE and tcs.cssa < depth:
            core.interrupt_thread(e, tid)
        elif op == "resume" and tcs.state == ThreadState.INTERRUPTED:
            core.eresume(e, tid)
        elif op == "finish" and tcs.state == ThreadState.IN_ENCLAVE:
            core.step_guest(e, tid, 10_000)
        for t in e.worker_tids:
            if e.tcs[t].state != ThreadState.IN_ENCLAVE:
                assert ctrlib.inferred_cssa(e, t) == e.tcs[t].cssa


# -- migration ------------------------------------------------------------------


def paused_random(seed, steps):
    rng = random.Random(seed)
    program = random_program(rng)
    e = core.create_enclave(program, small_config())
    key = os.urandom(32)
    ctrlib.prepare_migration(e, key=key)
    e.debug_write("heap", 0, rng.randbytes(e.config.heap_size))
    cpus = {}
    for tid in e.worker_tids:
        core.ecall(e, FN_RUN, thread_id=tid)
        core.step_guest(e, tid, steps[tid], mixing_ocall)
        cpus[tid] = e.cpus[tid].snapshot()
        core.interrupt_thread(e, tid)
    before = {t: (cpus[t],) + guest_state(e, t)[1:] for t in e.worker_tids}
    return e, key, before


def staged_destination(e, header):
    d = core.create_enclave(e.program, e.config)
    ctrlib.prepare_migration(d)
    for tid, n in enumerate(header.cssa):
        for _ in range(n):
            core.ecall(d, FN_PLACEHOLDER, thread_id=tid)
            core.interrupt_thread(d, tid)
    return d


@fast
@given(seed=seeds, steps=st.tuples(st.integers(0, 3000), st.integers(0, 3000)), provider=st.sampled_from(["hw", "sw"]))
def test_round_trip_reproduces_guest_state(seed, steps, provider):
    src, key, before = paused_random(seed, steps)
    ctrlib.prepare_migration(src, key=key, provider=provider)
    buf = bytearray(ctrlib.required_export_size(src))
    ctrlib.enclave_export_all(src, buf)
    header, _ = ctrlib.parse_header(buf)
    dst = staged_destination(src, header)
    assert ctrlib.enclave_import_all(dst, buf, key).allow_resume
    # the released source is the reference continuation
    ctrlib.release_for_fork(src)
    for t in dst.worker_tids:
        core.eresume(dst, t)
        core.eresume(src, t)
    for t in dst.worker_tids:
        assert guest_state(dst, t) == before[t]
    for t in dst.worker_tids:
        assert run_traced(dst, t, 300) == run_traced(src, t, 300)


@pytest.fixture(scope="module")
def exported():
    src, key, _ = paused_random(11, (500, 900))
    buf = bytearray(ctrlib.required_export_size(src))
    ctrlib.enclave_export_all(src, buf)
    header, hlen = ctrlib.parse_header(buf)
    return src, key, bytes(buf), header, hlen


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(data=st.data())
def test_any_bit_flip_is_rejected_without_mutation(exported, data):
    src, key, raw, header, hlen = exported
    end = hlen + header.ciphertext_length + img.TAG_SIZE
    bit = data.draw(st.integers(0, end * 8 - 1))
    buf = bytearray(raw)
    buf[bit // 8] ^= 1 << (bit % 8)
    dst = staged_destination(src, header)
    before = core.inspect_memory(dst)
    with pytest.raises((AuthenticationFailed, MeasurementMismatch, MalformedImage)):
        ctrlib.enclave_import_all(dst, buf, key)
    assert core.inspect_memory(dst) == before


# -- codecs ---------------------------------------------------------------------

b16 = st.binary(min_size=16, max_size=16)
b32 = st.binary(min_size=32, max_size=32)


@st.composite
def headers(draw):
    n = draw(st.integers(1, 8))
    sizes = draw(st.lists(st.integers(0, 1 << 20), min_size=3 + n, max_size=3 + n))
    sections, base = [], draw(st.integers(0, 1 << 40))
    for s in sizes:
        sections.append((base, s))
        base += s
    return img.ImageHeader(
        image_id=draw(b16),
        measurement=draw(b32),
        sections=tuple(sections),
        cssa=tuple(draw(st.lists(st.integers(0, 0xFFFF), min_size=n, max_size=n))),
        nonce=draw(st.binary(min_size=12, max_size=12)),
        ciphertext_length=sum(sizes),
    )


@settings(max_examples=200, deadline=None)
@given(h=headers())
def test_header_round_trip(h):
    raw = h.encode()
    assert len(raw) == img.header_size(h.n_threads)
    # parse_header needs the ciphertext and tag to be present
    buf = raw + bytes(h.ciphertext_length + img.TAG_SIZE)
    assert ctrlib.parse_header(buf) == (h, len(raw))


names = st.text(string.ascii_letters + string.digits + "-_", min_size=1, max_size=24)


@st.composite
def staged_items(draw):
    items = []
    for i in range(draw(st.integers(0, 4))):
        cfg = small_config(
            heap_size=draw(st.integers(1, 64)) * 1024,
            max_threads=draw(st.integers(1, 8)),
            ssa_depth=draw(st.integers(1, 4)),
            data_init=draw(st.binary(max_size=64)),
            debug=draw(st.booleans()),
        )
        items.append(StagedEnclave(draw(names), cfg, draw(st.sampled_from(["hw", "sw"])), f"export-buffer-{i}"))
    return items


@settings(max_examples=100, deadline=None)
@given(items=staged_items())
def test_staged_round_trip(items):
    assert decode_staged(encode_staged(items)) == items


messages = st.one_of(
    st.builds(protocol.AttestChallenge, st.sampled_from([1, 2, 3]), b16, b32),
    st.builds(protocol.Deposit, b16, st.binary(min_size=protocol.SEALED_KEY_SIZE, max_size=protocol.SEALED_KEY_SIZE)),
    st.builds(protocol.FetchResponse, b16, st.binary(min_size=protocol.SEALED_KEY_SIZE, max_size=protocol.SEALED_KEY_SIZE)),
    st.builds(protocol.DepositAck, b16, b32),
    st.builds(protocol.Fetch, b16),
    st.builds(protocol.Error, names, st.text(max_size=200)),
)


@settings(max_examples=300, deadline=None)
@given(m=messages)
def test_message_round_trip(m):
    raw = protocol.encode(m)
    assert raw[0] == m.TAG
    assert protocol.decode(raw) == m


@st.composite
def process_images(draw):
    regions = {
        draw(names): (draw(st.sampled_from(TAGS)), draw(st.binary(max_size=300)))
        for _ in range(draw(st.integers(0, 4)))
    }
    return ProcessImage(
        meta={"pid": draw(st.integers(1, 1 << 20)), "note": draw(st.text(max_size=20))},
        threads=[{"hid": i, "state": "parked"} for i in range(draw(st.integers(0, 3)))],
        resources=draw(st.dictionaries(st.integers(0, 1024), st.text(max_size=30), max_size=4)),
        manifest=draw(st.text(max_size=80)),
        staged=draw(st.binary(max_size=64)),
        regions=regions,
    )


@settings(max_examples=150, deadline=None)
@given(image=process_images())
def test_process_image_round_trip(image):
    back = ProcessImage.decode(image.encode())
    assert (back.meta, back.threads, back.resources, back.manifest) == (
        image.meta, image.threads, image.resources, image.manifest)
    assert bytes(back.staged) == image.staged
    assert {k: (t, bytes(d)) for k, (t, d) in back.regions.items()} == image.regions


# -- host flag protocol -----------------------------------------------------------


@given(m=st.booleans(), h=st.booleans(), a=st.booleans())
def test_should_park_only_while_migrating_before_entry(m, h, a):
    assert should_park(m, h, a) == (m and not h and not a)
    if h or a:
        assert not should_park(m, h, a)


@settings(max_examples=500, deadline=None)
@given(n=st.integers(1, 3), init=st.integers(0, 7), walk=st.lists(st.integers(0, 99), max_size=20))
def test_random_walks_keep_the_protocol_safe(n, init, walk):
    s = model.ModelState(False, False, False, tuple(model.IN if init >> i & 1 else model.OUT for i in range(n)), model.OUT)
    alphabet = model.events(n)
    for pick in walk:
        enabled = [(ev, nxt) for ev in alphabet if (nxt := model.step(s, ev)) is not None]
        if not enabled:
            break
        _, s = enabled[pick % len(enabled)]
        if s.h and not s.gated:
            assert model.IN not in s.workers
    for final in model.drain(s):
        assert model.PARKED not in final.workers
