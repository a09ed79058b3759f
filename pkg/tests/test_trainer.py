import math
import struct

import numpy as np
import pytest

from spkid.encoder import EncoderConfig
from spkid.errors import ConfigError, CorruptCheckpoint, DivergedLoss, ShapeMismatch, VersionMismatch
from spkid.numcore import Tensor
from spkid.trainer import (
    CHECKPOINT_MAGIC,
    TeacherLabels,
    TrainConfig,
    TrainLog,
    build_params,
    compute_mfcc_teacher,
    evaluate,
    finetune,
    finetune_validation,
    format_config,
    load_checkpoint,
    load_encoder_weights,
    load_teacher_cache,
    mfcc_teacher,
    model_from_checkpoint,
    parse_config,
    pretrain,
    read_checkpoint_header,
    save_checkpoint,
    save_teacher_cache,
    steps_to_threshold,
    teacher_hash,
)

SMALL = EncoderConfig(conv_layers=((8, 10, 5), (8, 3, 2), (8, 3, 2), (8, 3, 2), (8, 3, 2),
                                   (8, 2, 2), (8, 2, 2)),
                      model_dim=16, n_heads=2, n_layers=1, ffn_dim=32)


def small_config(tmp_path=None, **changes):
    base = TrainConfig(max_iter=4, batch_size=4, eval_interval=2, max_len_s=1.0, encoder=SMALL,
                       n_clusters=5, kmeans_iters=20, num_distractors=3,
                       checkpoint_dir=str(tmp_path) if tmp_path else "")
    return base.replace(**changes)


class TestConfig:
    def test_parse_with_comments_and_encoder_keys(self):
        text = """
        # desk run
        max_iter = 20   # steps
        lr = 0.002
        float64 = true
        objective = hubert
        model_dim = 32
        conv_layers = 16:10:5,16:3:2
        """
        c = parse_config(text)
        assert c.max_iter == 20 and c.lr == 0.002 and c.float64 and c.objective == "hubert"
        assert c.encoder.model_dim == 32
        assert c.encoder.conv_layers == ((16, 10, 5), (16, 3, 2))

    def test_defaults(self):
        c = parse_config("")
        assert (c.max_iter, c.batch_size, c.eval_interval, c.patience) == (500, 8, 10, 10)
        assert c.learning_rate == 1e-3
        assert c.replace(objective="w2v").learning_rate == 5e-4

    def test_overrides_win(self):
        c = parse_config("max_iter = 20\n", {"max_iter": "7", "seed": 3})
        assert c.max_iter == 7 and c.seed == 3

    @pytest.mark.parametrize("text", ["bogus = 1", "max_iter = ten", "max_iter 5",
                                      "max_iter = 0", "objective = sgd", "n_heads = 3",
                                      "float64 = maybe"])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_format_round_trip(self):
        c = small_config(seed=9, objective="w2v", kappa=0.25)
        assert parse_config(format_config(c)) == c
        assert TrainConfig.from_dict(c.to_dict()) == c


class TestTrainLog:
    def test_csv(self, tmp_path):
        log = TrainLog()
        log.record(1, 2.5)
        log.record(2, 1.25, 1.5)
        assert log.to_csv() == "step,TL,VL\n1,2.5,\n2,1.25,1.5\n"
        log.write_csv(tmp_path / "t.csv")
        assert TrainLog.read_csv(tmp_path / "t.csv").rows == log.rows
        assert log.steps == 2

    def test_steps_increase(self):
        log = TrainLog()
        log.record(3, 1.0)
        with pytest.raises(ValueError):
            log.record(3, 1.0)

    def test_steps_to_threshold(self):
        log = TrainLog(evals=[{"step": 10, "macro_f1": 0.5}, {"step": 20, "macro_f1": 0.96},
                              {"step": 30, "macro_f1": 0.99}])
        assert steps_to_threshold(log) == 20
        assert steps_to_threshold(log, threshold=0.999) is None


class TestCheckpoint:
    def tensors(self):
        rng = np.random.default_rng(0)
        return {"a": rng.normal(size=(3, 4)).astype(np.float32),
                "b.c": rng.normal(size=7).astype(np.float32),
                "scalar": np.float32(2.5).reshape(())}

    def test_round_trip_bitwise(self, tmp_path):
        t = self.tensors()
        save_checkpoint(t, small_config(), tmp_path / "m.ckpt", {"labels": ["x"]})
        ck = load_checkpoint(tmp_path / "m.ckpt")
        assert set(ck.tensors) == set(t)
        for name in t:
            assert ck.tensors[name].tobytes() == np.asarray(t[name], dtype="<f4").tobytes()
        assert ck.train_config() == small_config() and ck.meta == {"labels": ["x"]}

    def test_params_round_trip(self, tmp_path):
        params = build_params(small_config(), n_classes=3)
        save_checkpoint(params, small_config(), tmp_path / "p.ckpt")
        ck = load_checkpoint(tmp_path / "p.ckpt")
        assert all(np.array_equal(ck.tensors[n], p.data) for n, p in params.items())

    def test_header_only(self, tmp_path):
        save_checkpoint(self.tensors(), small_config(), tmp_path / "m.ckpt")
        blob = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "m.ckpt").write_bytes(blob[:len(blob) - 40])
        header = read_checkpoint_header(tmp_path / "m.ckpt")
        assert {d["name"]: d["shape"] for d in header["tensors"]} == \
            {"a": [3, 4], "b.c": [7], "scalar": []}

    def test_truncated_payload(self, tmp_path):
        save_checkpoint(self.tensors(), small_config(), tmp_path / "m.ckpt")
        blob = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "m.ckpt").write_bytes(blob[:-1])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_bad_magic_and_version(self, tmp_path):
        save_checkpoint(self.tensors(), small_config(), tmp_path / "m.ckpt")
        blob = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "bad.ckpt").write_bytes(b"X" + blob[1:])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "bad.ckpt")
        n = struct.unpack_from("<Q", blob, 8)[0]
        header = blob[16:16 + n].replace(b'"format_version": 1', b'"format_version": 2')
        (tmp_path / "v2.ckpt").write_bytes(blob[:16] + header + blob[16 + n:])
        with pytest.raises(VersionMismatch):
            load_checkpoint(tmp_path / "v2.ckpt")

    def test_overlapping_directory(self, tmp_path):
        save_checkpoint(self.tensors(), small_config(), tmp_path / "m.ckpt")
        blob = (tmp_path / "m.ckpt").read_bytes()
        n = struct.unpack_from("<Q", blob, 8)[0]
        header = blob[16:16 + n].replace(b'"offset": 48', b'"offset": 44')
        assert header != blob[16:16 + n]
        (tmp_path / "o.ckpt").write_bytes(blob[:16] + header + blob[16 + n:])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "o.ckpt")

    def test_magic(self, tmp_path):
        save_checkpoint({}, small_config(), tmp_path / "e.ckpt")
        assert (tmp_path / "e.ckpt").read_bytes()[:8] == CHECKPOINT_MAGIC


class TestTeacher:
    def test_cache_round_trip_and_invalidation(self, tmp_path, small_corpus):
        config = small_config(tmp_path / "run", objective="hubert")
        first = mfcc_teacher(config, small_corpus)
        cache = tmp_path / "run.teacher.jsonl"
        assert cache.exists()
        again = load_teacher_cache(cache, teacher_hash(config))
        assert again.k == 5 and all(np.array_equal(first.labels[p], again.labels[p])
                                    for p in first.labels)
        assert load_teacher_cache(cache, teacher_hash(config.replace(n_clusters=6))) is None
        assert load_teacher_cache(tmp_path / "missing.jsonl", "x") is None

    def test_labels_cover_corpus(self, small_corpus):
        teacher = compute_mfcc_teacher(small_config(objective="hubert"), small_corpus)
        assert set(teacher.labels) == {e.path for e in small_corpus.entries}
        assert all(v.size == 98 and v.max() < 5 for v in teacher.labels.values())

    def test_save_format(self, tmp_path):
        save_teacher_cache(tmp_path / "t.jsonl", TeacherLabels({"a.wav": np.array([1, 2])}, 3),
                           "abc")
        lines = (tmp_path / "t.jsonl").read_text().splitlines()
        assert lines[0] == '{"config_hash": "abc", "hop": 160, "k": 3, "window": 400}'
        assert lines[1] == '{"path": "a.wav", "labels": [1, 2]}'


class TestFinetune:
    def test_single_step(self, small_corpus):
        _, log = finetune(small_config(max_iter=1), small_corpus)
        assert len(log.rows) == 1 and log.rows[0][2] is not None

    def test_first_loss_near_chance(self, small_corpus):
        _, log = finetune(small_config(max_iter=1), small_corpus)
        assert abs(log.rows[0][1] - math.log(3)) <= 0.2 * math.log(3)

    def test_float64_bitwise_reproducible(self, tmp_path, small_corpus):
        finetune(small_config(tmp_path / "a", float64=True), small_corpus)
        finetune(small_config(tmp_path / "b", float64=True), small_corpus)
        a = (tmp_path / "a" / "trainlog.csv").read_bytes()
        assert a == (tmp_path / "b" / "trainlog.csv").read_bytes()
        ta = load_checkpoint(tmp_path / "a" / "best.ckpt").tensors
        tb = load_checkpoint(tmp_path / "b" / "best.ckpt").tensors
        assert all(ta[n].tobytes() == tb[n].tobytes() for n in ta)

    def test_float32_close(self, small_corpus):
        _, a = finetune(small_config(), small_corpus)
        _, b = finetune(small_config(), small_corpus)
        assert np.allclose([r[1] for r in a.rows], [r[1] for r in b.rows], rtol=1e-5, atol=0)

    def test_outputs_and_best_vl(self, tmp_path, small_corpus):
        config = small_config(tmp_path, float64=True, max_iter=6)
        ckpt, log = finetune(config, small_corpus)
        for name in ("best.ckpt", "trainlog.csv", "config.txt"):
            assert (tmp_path / name).exists()
        assert parse_config((tmp_path / "config.txt").read_text()) == config
        vls = [r[2] for r in log.rows if r[2] is not None]
        assert [r[0] for r in log.rows if r[2] is not None] == [2, 4, 6]
        assert ckpt.meta["best_vl"] == min(vls)
        model = model_from_checkpoint(load_checkpoint(tmp_path / "best.ckpt"), np.float64)
        weights = np.asarray(ckpt.meta["class_weights"])
        vl, _ = finetune_validation(model, config, small_corpus, weights)
        # the checkpoint stores float32 tensors
        assert vl == pytest.approx(ckpt.meta["best_vl"], rel=1e-4)

    def test_early_stopping_respects_patience(self, small_corpus):
        config = small_config(max_iter=200, eval_interval=1, patience=3, lr=0.5)
        _, log = finetune(config, small_corpus)
        assert len(log.evals) >= 3
        if log.steps < 200:
            best = min(range(len(log.evals)), key=lambda i: log.evals[i]["vl"])
            assert len(log.evals) - 1 - best == 3

    def test_frozen_encoder(self, small_corpus):
        ckpt, _ = finetune(small_config(freeze_encoder=True), small_corpus)
        fresh = build_params(small_config(), n_classes=3)
        for name, value in ckpt.tensors.items():
            if name.startswith("enc."):
                assert np.array_equal(value, fresh[name].data)
        assert not np.array_equal(ckpt.tensors["head.out"], fresh["head.out"].data)

    def test_divergence_leaves_loadable_checkpoint(self, tmp_path, small_corpus, monkeypatch):
        import spkid.trainer as trainer

        real = trainer.finetune_loss

        def exploding(model, batch, weights):
            loss, logits = real(model, batch, weights)
            if exploding.calls >= 3:
                loss = trainer.nc.mul(loss, float("nan"))
            exploding.calls += 1
            return loss, logits
        exploding.calls = 0
        monkeypatch.setattr(trainer, "finetune_loss", exploding)
        with pytest.raises(DivergedLoss):
            finetune(small_config(tmp_path), small_corpus)
        ck = load_checkpoint(tmp_path / "last_good.ckpt")
        assert ck.meta["diverged_at"] == 4
        assert all(np.all(np.isfinite(v)) for v in ck.tensors.values())


class TestPretrain:
    @pytest.mark.parametrize("objective", ["w2v", "hubert"])
    def test_runs_and_inits_finetune(self, tmp_path, small_corpus, objective):
        config = small_config(tmp_path / objective, objective=objective)
        ckpt, log = pretrain(config, small_corpus)
        assert log.steps == 4 and all(math.isfinite(r[1]) for r in log.rows)
        if objective == "hubert":
            assert "masked_accuracy" in log.evals[0]
        loaded = load_checkpoint(tmp_path / objective / "best.ckpt")
        tuned, _ = finetune(small_config(max_iter=1), small_corpus, init=loaded)
        assert tuned.tensors["head.out"].shape == (32, 3)

    def test_init_copies_encoder(self, tmp_path, small_corpus):
        ckpt, _ = pretrain(small_config(tmp_path, objective="hubert"), small_corpus)
        params = build_params(small_config(seed=5), n_classes=3)
        assert load_encoder_weights(params, ckpt) == sum(n.startswith("enc.") for n in ckpt.tensors)
        assert np.array_equal(params["enc.pos_emb"].data, ckpt.tensors["enc.pos_emb"])

    def test_init_shape_mismatch(self, tmp_path, small_corpus):
        ckpt, _ = pretrain(small_config(tmp_path, objective="hubert", max_iter=1), small_corpus)
        other = small_config(model_dim=8, n_heads=2)
        with pytest.raises(ShapeMismatch):
            load_encoder_weights(build_params(other, n_classes=3), ckpt)

    def test_rejects_finetune_objective(self, small_corpus):
        with pytest.raises(ConfigError):
            pretrain(small_config(), small_corpus)


class TestEvaluate:
    def model(self, small_corpus):
        params = build_params(small_config(), n_classes=3)
        params["head.out"].data[...] = 0.0
        params["head.out_bias"].data[...] = [5.0, 0.0, 0.0]
        from spkid.classify import SpeakerModel
        return SpeakerModel(params, SMALL, small_corpus.labels, 1.0)

    def test_constant_model(self, small_corpus):
        report = evaluate(self.model(small_corpus), small_corpus, "test")
        assert report.recall.tolist() == [1.0, 0.0, 0.0]
        assert report.accuracy == np.trace(report.confusion.counts) / report.confusion.total

    def test_perfect_predictions(self, small_corpus, monkeypatch):
        import spkid.trainer as trainer

        def oracle(self, waves, lengths):
            return Tensor(np.eye(3)[current.pop(0)] * 10)
        model = self.model(small_corpus)
        targets = [small_corpus.class_id(e.speaker) for e in small_corpus.split("test")]
        current = [np.array(targets)]
        monkeypatch.setattr(trainer.SpeakerModel, "logits", oracle)
        report = evaluate(model, small_corpus, "test")
        assert report.macro_f1 == 1.0
        assert np.array_equal(report.confusion.counts, np.diag(np.bincount(targets)))
