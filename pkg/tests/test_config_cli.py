import numpy as np
import pytest

from kvformer.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_OK, main, run
from kvformer.config import KEYS, PRESETS, parse_config
from kvformer.exceptions import ConfigError
from kvformer.reporting import read_matrix_csv, read_pgm
from kvformer.training import LOSS_CSV_HEADER, METRICS_CSV_HEADER

# -- configuration ---------------------------------------------------------------------------


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("")
    cfg = parse_config(path)
    for key, (_conv, default, _desc) in KEYS.items():
        assert cfg.values[key] == default
    assert cfg.steps == 2000
    assert cfg.effective_batch_size == 128


def test_attention_list_gives_two_runs(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("attention=kv,kvpos\n")
    cfg = parse_config(path)
    assert [k.variant for k in cfg.attention_kinds()] == ["kv", "kvpos"]


def test_swap_parity_rule_is_cited():
    with pytest.raises(ConfigError, match="swap.*even.*halves.*seq_len=15"):
        parse_config(overrides={"task": "swap", "seq_len": "15"})


def test_comments_and_whitespace(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# sweep\n  d_model = 32   # narrower\n\nlr=0.002\n")
    cfg = parse_config(path)
    assert cfg.d_model == 32 and cfg.lr == 0.002


def test_overrides_win_over_file_and_preset(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("preset = charlm\ncorpus = x.txt\nd_model = 32\n")
    cfg = parse_config(path, {"d_model": "16"})
    assert cfg.d_model == 16
    assert cfg.seq_len == PRESETS["charlm"]["seq_len"]
    assert cfg.dropout == 0.2


@pytest.mark.parametrize("text,needle", [
    ("colour = red", "colour"),
    ("d_model = big", "d_model"),
    ("just words", "key=value"),
    ("n_heads = 3", "divisible"),
    ("attention = qkv,linear", "linear"),
    ("preset = huge", "huge"),
    ("task = chars", "corpus"),
    ("max_len = 4", "max_len"),
])
def test_errors_name_the_problem(tmp_path, text, needle):
    path = tmp_path / "run.cfg"
    path.write_text(text + "\n")
    with pytest.raises(ConfigError, match=needle):
        parse_config(path)


def test_unknown_override_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        parse_config(overrides={"bogus": "1"})


def test_echo_round_trip(tmp_path):
    cfg = parse_config(overrides={"task": "sort", "attention": "kvpos,qkv", "lr": "0.0003",
                                  "attn_all": "yes", "dropout": "0.1"})
    path = tmp_path / "echo.cfg"
    path.write_text(cfg.to_text())
    again = parse_config(path)
    assert again.values == cfg.values
    assert again.to_text() == cfg.to_text()


# -- cost verb --------------------------------------------------------------------------------


def test_cost_table(tmp_path, capsys):
    out = tmp_path / "cost.csv"
    ref = tmp_path / "ref.csv"
    assert main(["cost", "--n", "16", "--d", "64", "--m", "0,10", "--out", str(out),
                 "--reference", str(ref)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "kind,n,d,H,m,table1_flops,table1_params,full_layer_params,full_forward_flops"
    rows = {(r.split(",")[0], r.split(",")[4]): [int(v) for v in r.split(",")[5:]] for r in lines[1:]}
    assert rows[("qkv", "0")][0] == 2 * rows[("kv", "0")][0]
    # m = 0 collapses kvpos onto kv plus the map bias
    assert rows[("kvpos", "0")][2] == rows[("kv", "0")][2] + 1
    assert rows[("kvpos", "0")][:2] == rows[("kv", "0")][:2]
    assert rows[("kvpos", "10")][0] == 16 * 64 ** 2 + 16 ** 2 * 10

    ref_lines = ref.read_text().splitlines()
    assert ref_lines[0] == "kind,flops_formula,params_formula,n,d,m,flops,params"
    for line in ref_lines[1:]:
        kind, _f, _p, _n, _d, m, flops, params = line.split(",")
        assert [int(flops), int(params)] == rows[(kind, m)][:2]


def test_cost_to_stdout(capsys):
    assert main(["cost", "--attention", "kv"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[1] == "kv,16,64,2,0,65536,4096,12288,229376"


def test_cost_rejects_indivisible_heads(capsys):
    assert main(["cost", "--d", "10", "--heads", "3"]) == EXIT_CONFIG


# -- train verb --------------------------------------------------------------------------------

TINY = ["--task", "reverse", "--seq-len", "6", "--d-model", "8", "--n-heads", "2", "--n-layers", "1",
        "--max-steps", "6", "--batch-size", "8", "--eval-interval", "2", "--eval-batches", "1",
        "--test-batches", "1", "--pos-dim", "3"]


def train(tmp_path, name, *extra):
    out = tmp_path / name
    status = main(["train", *TINY, "--out-dir", str(out), *extra])
    return status, out


def test_train_sweep_artifacts(tmp_path):
    status, out = train(tmp_path, "a")
    assert status == EXIT_OK
    assert (out / "config.txt").exists()
    summary = (out / "metrics.csv").read_text().splitlines()
    assert summary[0] == METRICS_CSV_HEADER and len(summary) == 4
    for variant in ("qkv", "kv", "kvpos"):
        run_dir = out / f"reverse-{variant}-seed0"
        for name in ("config.txt", "loss.csv", "metrics.csv", "model.npz",
                     "attention/layer0_head0.csv", "attention/layer0_head0.pgm",
                     "attention/layer0_head0.scores.csv"):
            assert (run_dir / name).exists(), name
        loss = (run_dir / "loss.csv").read_text().splitlines()
        assert loss[0] == LOSS_CSV_HEADER
        assert len(loss) == len(set(loss))
        assert parse_config(run_dir / "config.txt").attention == (variant,)
    assert parse_config(out / "config.txt").values == parse_config(overrides={
        k.lstrip("-").replace("-", "_"): v for k, v in zip(TINY[::2], TINY[1::2])
    } | {"out_dir": str(out)}).values


def test_rerun_is_byte_identical(tmp_path):
    _, a = train(tmp_path, "a", "--attention", "kvpos")
    _, b = train(tmp_path, "b", "--attention", "kvpos")
    name = "reverse-kvpos-seed0/loss.csv"
    assert (a / name).read_bytes() == (b / name).read_bytes()
    _, c = train(tmp_path, "c", "--attention", "kvpos", "--seed", "1")
    assert (c / "reverse-kvpos-seed1/loss.csv").read_bytes() != (a / name).read_bytes()


def test_attn_all_exports_every_head(tmp_path):
    _, out = train(tmp_path, "a", "--attention", "kv", "--attn-all", "true", "--n-layers", "2")
    maps = sorted(p.name for p in (out / "reverse-kv-seed0/attention").glob("*.pgm"))
    assert maps == [f"layer{l}_head{h}.pgm" for l in range(2) for h in range(2)]


def test_train_config_error_exit(tmp_path, capsys):
    status, _ = train(tmp_path, "a", "--task", "swap", "--seq-len", "7")
    assert status == EXIT_CONFIG
    assert "even" in capsys.readouterr().err


def test_missing_config_file_is_io_error(tmp_path):
    assert main(["train", "-c", str(tmp_path / "nope.cfg")]) == EXIT_IO


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = parse_config(overrides={"out_dir": str(blocker / "sub"), "max_steps": "1"})
    assert run(cfg) == EXIT_IO


def test_divergence_exit(tmp_path):
    status, _ = train(tmp_path, "a", "--attention", "kv", "--lr", "1e30", "--grad-clip", "0",
                      "--max-steps", "30", "--warmup-steps", "1")
    assert status == EXIT_DIVERGED


# -- attnmap and gen verbs --------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    assert main(["train", *TINY, "--out-dir", str(out)]) == EXIT_OK
    return out


def test_attnmap_rows_sum_to_one(trained, tmp_path):
    prefix = tmp_path / "map"
    assert main(["attnmap", str(trained / "reverse-qkv-seed0/model.npz"), "--out", str(prefix)]) == EXIT_OK
    w = read_matrix_csv(tmp_path / "map_layer0_head0.csv")
    assert w.shape == (6, 6)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-5)
    img = read_pgm(tmp_path / "map_layer0_head0.pgm")
    assert img.shape == (6, 6)
    assert img.min() == 0
    assert img[np.unravel_index(w.argmax(), w.shape)] == 0


def test_attnmap_kv_scores_are_symmetric(trained, tmp_path):
    prefix = tmp_path / "kv"
    assert main(["attnmap", str(trained / "reverse-kv-seed0/model.npz"), "--all", "--out", str(prefix)]) == 0
    for h in range(2):
        s = read_matrix_csv(tmp_path / f"kv_layer0_head{h}.scores.csv")
        assert np.max(np.abs(s - s.T)) <= 1e-5


def test_attnmap_single_token(trained, tmp_path):
    prefix = tmp_path / "one"
    assert main(["attnmap", str(trained / "reverse-kvpos-seed0/model.npz"), "--tokens", "3",
                 "--out", str(prefix)]) == EXIT_OK
    assert read_matrix_csv(tmp_path / "one_layer0_head0.csv").tolist() == [[1.0]]
    assert read_pgm(tmp_path / "one_layer0_head0.pgm").tolist() == [[0]]


def test_attnmap_head_out_of_range(trained, tmp_path):
    status = main(["attnmap", str(trained / "reverse-kv-seed0/model.npz"), "--head", "5",
                   "--out", str(tmp_path / "x")])
    assert status == EXIT_CONFIG


def test_gen_needs_lm_checkpoint(trained, capsys):
    assert main(["gen", str(trained / "reverse-kv-seed0/model.npz"), "--prompt", "1"]) == EXIT_CONFIG


@pytest.fixture(scope="module")
def char_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("lm")
    corpus = root / "corpus.txt"
    corpus.write_text("abcabcabd " * 300)
    out = root / "runs"
    args = ["train", "--preset", "charlm", "--corpus", str(corpus), "--attention", "kv",
            "--seq-len", "8", "--d-model", "8", "--n-heads", "2", "--n-layers", "1",
            "--max-steps", "5", "--batch-size", "4", "--eval-batches", "1", "--test-batches", "1",
            "--out-dir", str(out)]
    assert main(args) == EXIT_OK
    return out / "chars-kv-seed0/model.npz"


def test_gen_is_deterministic(char_run, capsys):
    assert main(["gen", str(char_run), "--prompt", "ab", "--steps", "12"]) == EXIT_OK
    first = capsys.readouterr().out
    assert main(["gen", str(char_run), "--prompt", "ab", "--steps", "12"]) == EXIT_OK
    assert capsys.readouterr().out == first
    assert first.startswith("ab") and len(first.rstrip("\n")) == 14


def test_gen_unknown_prompt_character(char_run, capsys):
    assert main(["gen", str(char_run), "--prompt", "zz"]) == EXIT_CONFIG
    assert "'z'" in capsys.readouterr().err
