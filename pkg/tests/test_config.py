import pytest

from arcsim import config as C


def test_defaults_roundtrip(tmp_path):
    cfg = C.ExperimentConfig()
    p = tmp_path / "c.yaml"
    p.write_text(C.dump(cfg))
    back = C.load(p)
    assert C.to_tree(back) == C.to_tree(cfg)


def test_partial_file_overrides_only_given_keys(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("data: {normal_episodes: 3}\nred: {env: {reward: {w_detect: 2.5}}}\nseeds: {data: 7}\n")
    cfg = C.load(p)
    assert cfg.data.normal_episodes == 3 and cfg.data.episode_length == C.DataConfig().episode_length
    assert cfg.red.env.reward.w_detect == 2.5
    assert cfg.seeds.data == 7


def test_plant_section_reaches_env_and_coevolution(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("plant: {V: 90.0}\nseeds: {coevolution: 4}\n")
    cfg = C.load(p)
    assert cfg.env_config().plant.V == 90.0
    cc = cfg.coevolution_config()
    assert cc.seed == 4 and cc.env.plant.V == 90.0


@pytest.mark.parametrize(
    "text",
    [
        "dataa: {}\n",
        "data: {normal_episodes: 2.5}\n",
        "data: {normal_episodes: true}\n",
        "coevolution: {ratios: [0.5, 0.5]}\n",
        "coevolution: {ratios: [0.9, 0.9, 0.1, 0.1]}\n",
        "federation: {agg: 3}\n",
        "data: [1, 2]\n",
        "data: {a: [\n",
    ],
)
def test_bad_files_rejected(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    with pytest.raises(C.ConfigError):
        C.load(p).coevolution_config()


def test_missing_file_means_defaults():
    assert C.to_tree(C.load(None)) == C.to_tree(C.ExperimentConfig())
