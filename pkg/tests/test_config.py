import pytest

from parplan.config import ConfigError, ConfigParseError, load_config

CLUSTER = {"total_gpus": 16, "gpus_per_node": 8, "gpu_memory_capacity_bytes": 80e9}


def write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_preset_with_minimal_cluster():
    cfg = load_config(data={"cluster": dict(CLUSTER)}, preset="7b")
    m = cfg.model
    assert (m.hidden_dim, m.layers, m.heads, m.vocab) == (4096, 32, 32, 100_000)
    assert cfg.overlap.slowdown == 1.30 and cfg.top_k == 10 and cfg.profile is None


def test_empty_file_is_parse_error(tmp_path):
    with pytest.raises(ConfigParseError, match="empty"):
        load_config(write(tmp_path, ""))


def test_yaml_error_has_position(tmp_path):
    with pytest.raises(ConfigParseError, match="line 2, column 13"):
        load_config(write(tmp_path, "model:\n  preset: 7b: x\n"))


def test_hidden_dim_zero_named(tmp_path):
    text = ("model: {hidden_dim: 0, layers: 2, heads: 2, vocab: 10, seq_len: 8,"
            " global_batch_tokens: 16}\n"
            "cluster: {total_gpus: 2, gpus_per_node: 2, gpu_memory_capacity_bytes: 1e9}\n")
    with pytest.raises(ConfigError) as exc:
        load_config(write(tmp_path, text))
    assert any("hidden_dim" in p for p in exc.value.problems)


def test_unknown_keys_named():
    with pytest.raises(ConfigError) as exc:
        load_config(data={"model": {"preset": "7b", "hiden_dim": 3}, "cluster": dict(CLUSTER),
                          "extras": {}})
    assert "unknown key model.hiden_dim" in exc.value.problems
    assert "unknown section 'extras'" in exc.value.problems


def test_all_failures_listed_at_once():
    with pytest.raises(ConfigError) as exc:
        load_config(data={"model": {"preset": "7b", "layers": -1},
                          "cluster": {"total_gpus": 12, "gpus_per_node": 8,
                                      "gpu_memory_capacity_bytes": 1},
                          "overlap": {"slowdown_ratio": 0.5}})
    text = "\n".join(exc.value.problems)
    for word in ("layers", "total_gpus", "slowdown_ratio"):
        assert word in text


def test_overrides_win(tmp_path):
    p = write(tmp_path, "model: {preset: 7b, seq_len: 4096}\ncluster: {total_gpus: 16, "
                        "gpus_per_node: 8, gpu_memory_capacity_bytes: 80e9}\n")
    cfg = load_config(p, overrides={"model.seq_len": 8192, "cluster.total_gpus": 8})
    assert cfg.model.seq_len == 8192 and cfg.cluster.total_gpus == 8


def test_relative_paths_and_profile(tmp_path):
    (tmp_path / "bw.csv").write_text(
        "op,participants,axis,message_bytes,bandwidth_bytes_per_sec\nall-gather,2,intra,1,1e9\n")
    (tmp_path / "t.csv").write_text("b,seq_per_gpu,hidden_per_gpu,forward_seconds\n1,4096,4096,0.01\n")
    p = write(tmp_path, "model: {preset: 7b}\ncluster: {total_gpus: 16, gpus_per_node: 8, "
                        "gpu_memory_capacity_bytes: 80e9}\ncompute: {mode: profiled, table_csv: t.csv}\n"
                        "paths: {bandwidth_csv: bw.csv}\n")
    cfg = load_config(p)
    assert cfg.profile is not None and cfg.bandwidth_csv == str(tmp_path / "bw.csv")
    assert cfg.compute.table == {(1, 4096, 4096): 0.01}


def test_missing_files_reported(tmp_path):
    p = write(tmp_path, "model: {preset: 7b}\ncluster: {total_gpus: 16, gpus_per_node: 8, "
                        "gpu_memory_capacity_bytes: 80e9}\ncompute: {mode: profiled}\n"
                        "paths: {bandwidth_csv: nope.csv}\n")
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    text = "\n".join(exc.value.problems)
    assert "nope.csv" in text and "table_csv" in text


def test_bad_types():
    with pytest.raises(ConfigError) as exc:
        load_config(data={"model": {"preset": "7b", "seq_len": "long"},
                          "cluster": dict(CLUSTER, total_gpus=True)})
    text = "\n".join(exc.value.problems)
    assert "seq_len" in text and "total_gpus" in text


def test_numeric_strings_coerced():
    cfg = load_config(data={"model": {"preset": "7b", "seq_len": "8192"},
                            "cluster": dict(CLUSTER, gpu_memory_capacity_bytes="80e9")})
    assert cfg.model.seq_len == 8192 and cfg.cluster.gpu_memory_capacity == 80e9


def test_unknown_preset_and_search_checks():
    with pytest.raises(ConfigError) as exc:
        load_config(data={"model": {"preset": "3b"}, "cluster": dict(CLUSTER),
                          "search": {"top_k": 0, "memory_slack": -1, "oss_variant": "x"}})
    text = "\n".join(exc.value.problems)
    for word in ("preset", "top_k", "memory_slack", "oss_variant"):
        assert word in text


def test_top_level_must_be_mapping(tmp_path):
    with pytest.raises(ConfigParseError):
        load_config(write(tmp_path, "- 1\n- 2\n"))
