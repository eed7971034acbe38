import csv
import io

import pytest
import yaml

from vmecrate import config as config_mod
from vmecrate.boards.mps import CAPACITY, FLAG_VALID, read_dump, reconstruct
from vmecrate.errors import ValidationError
from vmecrate.scenario import Runner, load_script, parse_script, run
from vmecrate.trace import read_trace


def script(text):
    return parse_script(yaml.safe_load(text))


@pytest.fixture
def cfg():
    return config_mod.load(config_mod.bundled("crate.yaml"))


HV_SCRIPT = """
version: 1
end: 10s
steps:
  - at: 0s
    write: {board: hv, register: setpoint_hi, value: 0x27}
  - at: 0s
    write: {board: hv, register: setpoint_lo, value: 0x10}
  - at: 0s
    write: {board: hv, register: command, value: 1}
  - at: 10s
    assert: {board: hv, field: output_kV, approx: 50.0, tol: 0}
  - at: 10s
    read: {board: hv, register: readback_hi, expect: 0x13}
  - at: 10s
    read: {board: hv, register: readback_lo, expect: 0x88}
"""


def test_hv_readback_script_passes(cfg, tmp_path):
    result = run(cfg, script(HV_SCRIPT), trace_path=tmp_path / "t.jsonl")
    assert result.exit_status == 0 and result.assertions == 3


def test_failing_assertion_reports_first(cfg, tmp_path):
    text = HV_SCRIPT.replace("approx: 50.0", "approx: 49.0") + \
        "  - at: 10s\n    assert: {board: hv, field: mode, equals: OFF}\n"
    trace = tmp_path / "t.jsonl"
    result = run(cfg, script(text), trace_path=trace, state_path=tmp_path / "s.json")
    assert result.exit_status == 1 and len(result.failures) == 2
    assert "output_kV" in result.first_failure
    assert trace.exists() and (tmp_path / "s.json").exists()


def test_trip_within_one_frame(cfg, tmp_path):
    text = """
version: 1
end: 2ms
steps:
  - at: 0s
    frames: {board: mps, count: 10, period: 100us, stations: [40.0, 30.0, 20.0],
             override: {6: [40.0, 30.0, 75.0]}}
"""
    trace = tmp_path / "t.jsonl"
    run(cfg, script(text), trace_path=trace)
    trips = [r for r in read_trace(trace) if r["kind"] == "Trip"]
    assert len(trips) == 1
    assert trips[0]["info"]["frame"] == 6 and trips[0]["info"]["reason"] == "LocationLimit(3)"
    assert trips[0]["time_ps"] == 6 * 100 * 10**6


def test_identical_runs_identical_traces(cfg, tmp_path):
    smoke = load_script(config_mod.bundled("smoke.yaml"))
    for name in ("a", "b"):
        assert run(cfg, smoke, seed=7, trace_path=tmp_path / f"{name}.jsonl").exit_status == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_seed_changes_fuzz_only(cfg, tmp_path):
    smoke = load_script(config_mod.bundled("smoke.yaml"))
    run(cfg, smoke, seed=1, dump_dir=tmp_path / "one")
    run(cfg, smoke, seed=2, dump_dir=tmp_path / "two")
    a = (tmp_path / "one" / "mps.mpsdump").read_bytes()
    b = (tmp_path / "two" / "mps.mpsdump").read_bytes()
    assert a != b


def test_replay_ten_frames(cfg, tmp_path):
    text = """
version: 1
end: 1ms
steps:
  - at: 0s
    frames: {board: mps, count: 10, period: 100us, stations: [4.0, 3.0, 2.0], loss: 0.25}
"""
    run(cfg, script(text), dump_dir=tmp_path)
    buf, ptr = read_dump(tmp_path / "mps.mpsdump")
    recs = reconstruct(buf, ptr)
    assert len(recs) == 10
    assert all(r.injector_uA == 9.25 and r.loss_uA == 0.25 and r.flags == FLAG_VALID for r in recs)
    assert (tmp_path / "dsp.mem").stat().st_size == 128 * 1024


def test_bus_verbs(cfg):
    text = """
version: 1
end: 1ms
steps:
  - at: 0s
    block_write: {board: dsp, region: memory, offset: 0x10, width: D16, data: [1, 2, 3]}
  - at: 0s
    block_read: {board: dsp, region: memory, offset: 0x10, width: D16, beats: 3, expect: [1, 2, 3]}
  - at: 0s
    rmw: {board: dsp, region: memory, offset: 0x40, mask: 1, set: 1, expect_old: 0}
  - at: 0s
    rmw: {board: dsp, region: memory, offset: 0x40, mask: 1, set: 1, expect_old: 1}
  - at: 0s
    read: {space: A16, address: 0xFF00, outcome: BusError}
  - at: 0s
    write: {board: hv, register: status, value: 1, outcome: BusError}
  - at: 0s
    dsp: {board: dsp, port: 0, kind: Write, offset: 0x100, width: D16, data: 0x1234}
  - at: 1us
    read: {board: dsp, region: memory, offset: 0x100, width: D16, expect: 0x1234}
  - at: 1us
    dsp_irq: {board: dsp, source: DSP_B, vector: 0x0140}
  - at: 1us
    iack: {level: 5, width: D08, expect: 0x40}
  - at: 1us
    iack: {level: 5, expect: BusError}
  - at: 2us
    scam_channel: {board: scam, hall: A, period: 16, width_ticks: 4}
  - at: 2us
    pll_set: {board: pll, phase: 16384, amplitude: 16383}
  - at: 2us
    assert: {board: pll, register: i_dac, equals: 16383}
  - at: 2us
    adc: {board: pll, channel: 1, volts: -5.0}
  - at: 2us
    assert: {board: pll, register: adc_1, equals: 16384}
  - at: 3us
    interlock: {board: hv, bit: 2, ok: false}
  - at: 3us
    hv_command: {board: hv, setpoint_kV: 10, expect: InterlockOpen}
  - at: 3us
    interlock: {board: hv, mask: 0xFF}
  - at: 3us
    hv_command: {board: hv, setpoint_kV: 10, expect: accepted}
  - at: 4us
    load_current: {board: hv, uA: 150}
  - at: 4us
    assert: {board: hv, field: mode, equals: TRIPPED}
  - at: 5us
    assert: {board: hv, field: mode, equals: BLEED_OFF}
  - at: 5us
    frame: {board: mps, injector: 500, stations: [1, 1, 1]}
  - at: 5us
    assert: {board: mps, field: shutdown, equals: true}
  - at: 6us
    operator_reset: {board: mps}
  - at: 6us
    assert: {board: mps, register: status, equals: 0}
  - at: 6us
    ring_config: {board: ring3, irq_enabled: true, level: 2, vector: 0x33}
  - at: 6us
    ring_send: {board: ring1, dest: 3, payload: 0xCAFE}
  - at: 10us
    assert: {board: ring3, field: last_payload, equals: 0xCAFE}
  - at: 10us
    iack: {level: 2, expect: 0x33}
  - at: 10us
    ring_link: {board: ring2, up: false}
  - at: 10us
    broadcast: {board: ring1, payload: 7}
  - at: 20us
    assert: {board: ring4, field: last_payload, equals: 0}
  - at: 20us
    ring_link: {board: ring2, up: true}
  - at: 20us
    ring_corrupt: {board: ring2}
  - at: 20us
    broadcast: {board: ring1, payload: 8}
  - at: 30us
    assert: {board: ring2, register: error_count, equals: 1}
  - at: 30us
    reset: {board: hv}
  - at: 30us
    assert: {board: hv, field: mode, equals: "OFF"}
  - at: 30us
    encoder: {board: pll, phase: 5}
"""
    result = Runner(config_mod.build_crate(cfg), script(text)).run()
    assert result.failures == []
    assert result.exit_status == 0


def test_script_validation():
    with pytest.raises(ValidationError):
        parse_script({"version": 1, "steps": [{"at": "1s", "frob": {}}]})
    with pytest.raises(ValidationError):
        parse_script({"version": 1, "steps": [{"at": "2s", "reset": {"board": "hv"}},
                                              {"at": "1s", "reset": {"board": "hv"}}]})
    with pytest.raises(ValidationError) as exc:
        parse_script({"version": 3, "end": "bogus", "steps": [{"at": "-1s", "reset": {}}]})
    assert len(exc.value.errors) >= 2


def test_smoke_on_default_config(cfg):
    smoke = load_script(config_mod.bundled("smoke.yaml"))
    assert Runner(config_mod.build_crate(cfg), smoke).run().exit_status == 0
