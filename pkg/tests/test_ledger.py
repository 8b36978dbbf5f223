import csv
import io
import random

import pytest

from pentidef.ledger import (BENCH_COLUMNS, BadSignature, BlobNotFound, DuplicateIdentity,
                             IndexGap, InvalidMeta, Ledger, MissingBlob, StaleRound,
                             UnknownIdentity, Workload, ZERO_DIGEST, bench_run, tamper_block)


def fresh(n_clients=3, seed=0):
    led = Ledger(seed=seed)
    ids = [led.register_identity(f"c{i}") for i in range(n_clients)]
    led.begin_round(1)
    return led, ids


def submit(led, ident, data=b"w", **meta):
    h = led.store_blob(data)
    return led.submit_model(led.make_record(ident, h, **meta))


def test_identity_sign_verify():
    led, (a, b, _) = fresh()
    sig = a.sign(b"probe")
    assert led.verify("c0", b"probe", sig)
    assert not led.verify("c0", b"probf", sig)
    bad = bytearray(sig)
    bad[0] ^= 1
    assert not led.verify("c0", b"probe", bytes(bad))
    assert not led.verify("c1", b"probe", sig)
    with pytest.raises(UnknownIdentity):
        led.verify("nobody", b"probe", sig)
    with pytest.raises(DuplicateIdentity):
        led.register_identity("c0")


def test_identity_deterministic_per_seed_and_id():
    k1 = Ledger(seed=5).register_identity("x").verify_key
    k2 = Ledger(seed=5).register_identity("x").verify_key
    k3 = Ledger(seed=6).register_identity("x").verify_key
    assert k1 == k2 != k3


def test_blob_store_content_addressed():
    led, _ = fresh()
    h1, h2 = led.store_blob(b"abc"), led.store_blob(b"abc")
    assert h1 == h2 and len(led.store) == 1
    assert led.fetch_blob(h1) == b"abc"
    with pytest.raises(BlobNotFound):
        led.fetch_blob("ab" * 32)


def test_submit_valid_increments_index():
    led, (a, b, _) = fresh()
    assert submit(led, a).model_index == 0
    assert submit(led, b).model_index == 1
    assert len(led) == 2


def _forged(led, ident, h):
    rec = led.make_record(ident, h)
    sig = bytearray(rec.signature)
    sig[5] ^= 0xFF
    return type(rec)(rec.blob_hash, rec.meta, bytes(sig))


def test_rejections_leave_ledger_unchanged():
    led, (a, b, _) = fresh()
    submit(led, a)
    h = led.store_blob(b"x")
    n_blobs = len(led.store)

    def rejected(exc, rec):
        with pytest.raises(exc):
            led.submit_model(rec)
        assert len(led) == 1 and len(led.store) == n_blobs

    rejected(BadSignature, _forged(led, b, h))
    rejected(MissingBlob, led.make_record(b, "ff" * 32))
    rejected(InvalidMeta, led.make_record(b, h, sigma=0.5))
    stale = led.make_record(b, h)
    led.begin_round(2)
    rejected(StaleRound, stale)
    assert led.verify_chain()


def test_index_gap_with_valid_signature():
    led, (a, _, _) = fresh()
    h = led.store_blob(b"x")
    rec = led.make_record(a, h)
    submit(led, a, b"y")
    with pytest.raises(IndexGap):
        led.submit_model(rec)


def test_queries_examples():
    led, (a, b, c) = fresh()
    submit(led, a, b"1")
    submit(led, b, b"2", adversary=True, benign_verdict=False)
    submit(led, c, b"3", selected=True)
    all_ = led.query_models("all")
    assert [r.meta.model_index for r in all_] == [0, 1, 2]
    assert led.query_models("last")[0].meta.model_index == 2
    assert [r.meta.client_id for r in led.query_models("adversary")] == ["c1"]
    assert led.query_models("selected_client", "c2")[0].meta.selected
    assert led.query_models("model_index", 9) == []
    with pytest.raises(ValueError):
        led.query_models("by_color")


def test_query_filters_match_exhaustive_scan():
    r = random.Random(0)
    for trial in range(1000):
        led = Ledger(seed=trial)
        ids = [led.register_identity(f"c{i}") for i in range(r.randint(1, 4))]
        for t in range(1, r.randint(1, 3) + 1):
            led.begin_round(t)
            for _ in range(r.randint(0, 4)):
                ident = r.choice(ids)
                submit(led, ident, r.randbytes(4), selected=r.random() < 0.3,
                       adversary=r.random() < 0.3, benign_verdict=r.random() < 0.7)
            led.seal_block()
        recs = led.query_models("all")
        assert [x.meta.model_index for x in recs] == list(range(len(led)))
        assert led.query_models("last") == ([max(recs, key=lambda x: x.meta.model_index)] if recs else [])
        for ident in ids:
            cid = ident.client_id
            assert led.query_models("selected_client", cid) == [
                x for x in recs if x.meta.client_id == cid and x.meta.selected]
            assert led.query_models("adversary", cid) == [
                x for x in recs if x.meta.client_id == cid and x.meta.adversary]
            assert led.query_models("benign", cid) == [
                x for x in recs if x.meta.client_id == cid and x.meta.benign_verdict]
        assert led.query_models("adversary") == [x for x in recs if x.meta.adversary]
        for i in range(len(recs) + 1):
            assert led.query_models("model_index", i) == [x for x in recs if x.meta.model_index == i]
        assert led.verify_chain()


def test_genesis_chain():
    led = Ledger()
    assert led.verify_chain()
    assert led.blocks[0].prev_hash == ZERO_DIGEST
    assert led.seal_block() is None


def test_every_single_byte_tamper_detected():
    led, ids = fresh()
    for i in range(4):
        submit(led, ids[i % 3], bytes([i]))
    led.seal_block()
    assert led.verify_chain()
    size = len(led.blocks[1].payload)
    for off in range(size):
        copy_blocks = list(led.blocks)
        tamper_block(led, 1, off)
        assert not led.verify_chain(), off
        led.blocks[:] = copy_blocks
    assert led.verify_chain()


def test_sealed_blocks_never_change():
    led, ids = fresh()
    submit(led, ids[0])
    b1 = led.seal_block()
    submit(led, ids[1], b"z")
    led.seal_block()
    assert led.blocks[1] == b1 and len(led.blocks) == 3


@pytest.mark.parametrize("rate", [5.0, 20.0])
def test_bench_small_workload(rate):
    report, led = bench_run(Workload(txs=200, send_rate=rate))
    assert report.chain_valid and led.verify_chain()
    for row in report.rows:
        assert row.succ == 200 and row.fail == 0
        assert row.min_latency <= row.avg_latency <= row.max_latency
        assert row.throughput <= rate * 1.05
    rows = list(csv.reader(io.StringIO(report.to_csv())))
    assert tuple(rows[0]) == BENCH_COLUMNS
    assert [r[0] for r in rows[1:]] == [r.name for r in report.rows]
