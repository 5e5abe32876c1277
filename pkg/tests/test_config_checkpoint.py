import json

import numpy as np
import pytest

from diffrec import config as config_mod
from diffrec.checkpoint import load_checkpoint, save_checkpoint
from diffrec.config import RunConfig, canonical_json, config_digest, load_config
from diffrec.data import synth_generate
from diffrec.model import DsrConfig, init_params
from diffrec.optim import AdamState
from diffrec.rng import RngStreams
from diffrec.schedule import make_schedule
from diffrec.training import ImportanceSampler, train_epoch


class TestConfig:
    def test_defaults_match_reference_hyperparameters(self):
        cfg = RunConfig()
        assert cfg.model.dim == 256
        assert cfg.model.seq_len == 50
        assert cfg.model.layers == 2 and cfg.model.heads == 2
        assert cfg.model.steps == 1000 and cfg.model.schedule == "sqrt"
        assert cfg.train.epochs == 50
        assert cfg.train.batch_size == 256
        assert cfg.train.lr == 0.001
        assert cfg.infer.num_seeds == 10

    def test_canonical_form_is_stable(self):
        a, b = canonical_json(RunConfig()), canonical_json(RunConfig())
        assert a == b
        parsed = json.loads(a)
        assert a == json.dumps(parsed, sort_keys=True, separators=(",", ":"))
        assert config_digest(RunConfig()) == config_digest(RunConfig())

    def test_round_trip_through_dict(self):
        cfg = RunConfig()
        cfg.model.dim = 64
        cfg.infer.seeds = (3, 4)
        back = config_mod.from_dict(config_mod.to_dict(cfg))
        assert canonical_json(back) == canonical_json(cfg)

    def test_file_and_override_precedence(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# comment\n"
            "master_seed = 5\n"
            "model.dim = 32\n"
            "[train]\n"
            "epochs = 3\n"
            "lr = 0.01\n"
        )
        cfg = load_config(path, overrides={"train.lr": "0.25", "model.heads": "4"})
        assert cfg.master_seed == 5
        assert cfg.model.dim == 32 and cfg.model.heads == 4
        assert cfg.train.epochs == 3 and cfg.train.lr == 0.25

    def test_bool_and_seed_list_parsing(self):
        cfg = load_config(overrides={
            "train.per_batch_step_sampling": "yes",
            "infer.seeds": "4,5,6",
            "model.use_step_embedding": "false",
        })
        assert cfg.train.per_batch_step_sampling is True
        assert cfg.infer.seeds == (4, 5, 6)
        assert cfg.model.use_step_embedding is False
        assert cfg.resolve_seeds() == (4, 5, 6)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("model.width = 3\n")
        with pytest.raises(ValueError):
            load_config(path)

    def test_derived_seeds_reproducible(self):
        a = RunConfig()
        b = RunConfig()
        assert a.resolve_seeds() == b.resolve_seeds()
        assert len(a.resolve_seeds()) == 10
        b.master_seed += 1
        assert a.resolve_seeds() != b.resolve_seeds()


def _training_state(seed=0, epochs=0):
    cfg = RunConfig()
    cfg.master_seed = seed
    cfg.model = DsrConfig(dim=8, seq_len=6, layers=1, heads=2, dropout=0.1,
                          steps=9, schedule="sqrt")
    cfg.train.epochs = 4
    cfg.train.batch_size = 16
    dataset = synth_generate(30, 14, 5.0, seed=1, min_len=5, max_len=6)
    streams = RngStreams(cfg.master_seed)
    params = init_params(cfg.model, dataset.vocab_size, streams.get("init"))
    opt = AdamState.init(params.tensors, lr=cfg.train.lr)
    sampler = ImportanceSampler(cfg.model.steps, cfg.train.history_depth)
    table = make_schedule(cfg.model.schedule, cfg.model.steps)
    for _ in range(epochs):
        train_epoch(dataset, params, sampler, opt, table, streams,
                    batch_size=cfg.train.batch_size)
    return cfg, dataset, streams, params, opt, sampler, table


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        cfg, _, streams, params, opt, sampler, _ = _training_state(epochs=2)
        p1, p2 = tmp_path / "a.dfkp", tmp_path / "b.dfkp"
        save_checkpoint(p1, cfg, params, opt, sampler, streams, 2)
        ck = load_checkpoint(p1)
        restored = ck.restore_streams()
        save_checkpoint(p2, ck.config, ck.params, ck.opt, ck.sampler, restored, ck.epoch)
        assert p1.read_bytes() == p2.read_bytes()

    def test_fields_survive_round_trip(self, tmp_path):
        cfg, _, streams, params, opt, sampler, _ = _training_state(epochs=1)
        path = tmp_path / "x.dfkp"
        save_checkpoint(path, cfg, params, opt, sampler, streams, 1)
        ck = load_checkpoint(path)
        assert ck.epoch == 1
        assert canonical_json(ck.config) == canonical_json(cfg)
        assert ck.opt.t == opt.t
        for name in params.names():
            np.testing.assert_array_equal(ck.params[name].data, params[name].data)
            np.testing.assert_array_equal(ck.opt.m[name], opt.m[name])
            np.testing.assert_array_equal(ck.opt.v[name], opt.v[name])
        np.testing.assert_array_equal(ck.sampler.values, sampler.values)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.dfkp"
        path.write_bytes(b"WHAT" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_resume_is_bit_equivalent(self, tmp_path):
        # uninterrupted: 4 epochs straight
        cfg, dataset, streams, params, opt, sampler, table = _training_state(seed=3)
        for _ in range(4):
            train_epoch(dataset, params, sampler, opt, table, streams, batch_size=16)
        straight = {n: params[n].data.copy() for n in params.names()}

        # interrupted: 2 epochs, checkpoint, reload, 2 more
        cfg2, dataset2, streams2, params2, opt2, sampler2, table2 = _training_state(seed=3)
        for _ in range(2):
            train_epoch(dataset2, params2, sampler2, opt2, table2, streams2, batch_size=16)
        mid = tmp_path / "mid.dfkp"
        save_checkpoint(mid, cfg2, params2, opt2, sampler2, streams2, 2)
        ck = load_checkpoint(mid)
        resumed_streams = ck.restore_streams()
        for _ in range(2):
            train_epoch(dataset2, ck.params, ck.sampler, ck.opt, table2,
                        resumed_streams, batch_size=16)
        for name in straight:
            np.testing.assert_array_equal(ck.params[name].data, straight[name])

    def test_float64_params_rejected(self, tmp_path):
        cfg, _, streams, params, opt, sampler, _ = _training_state()
        params.tensors["output.b"].data = params["output.b"].data.astype(np.float64)
        with pytest.raises(ValueError):
            save_checkpoint(tmp_path / "bad.dfkp", cfg, params, opt, sampler, streams, 0)
