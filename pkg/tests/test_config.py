import json

import pytest

from qkdnet.config import ConfigError, load_config, parse_config, preset_path


def raw_preset():
    return json.loads(preset_path().read_text())


def test_preset_topology(preset):
    assert set(preset.nodes) == {"TS", "PO", "LJ", "RI"}
    assert [l.id for l in preset.links] == ["TS-PO", "LJ-PO", "TS-RI"]
    assert set(preset.trusted_nodes) == {"TS", "PO"}
    assert preset.link_between("PO", "TS").id == "TS-PO"
    with pytest.raises(ConfigError):
        preset.link_between("RI", "LJ")
    with pytest.raises(ConfigError, match="unknown link"):
        preset.link("XX")


@pytest.mark.parametrize(
    "mutate, where",
    [
        (lambda r: r["links"][1]["link_params"].update(visibility_x=1.5), r"links\[1\]\.link_params"),
        (lambda r: r["links"][0]["protocol_params"].update(mu1=0.1), r"links\[0\]\.protocol_params"),
        (lambda r: r["links"][2]["link_params"].update(bogus=1), r"links\[2\]\.link_params: unknown"),
        (lambda r: r["links"][0].update(endpoints=["TS", "XX"]), r"links\[0\]\.endpoints: undeclared"),
        (lambda r: r["links"][0].update(endpoints=["TS", "TS"]), r"links\[0\]\.endpoints"),
        (lambda r: r["links"][1].update(id="TS-PO"), r"links\[1\]\.id: duplicate"),
        (lambda r: r["links"][0].update(n_z_block=0), r"links\[0\]\.n_z_block"),
        (lambda r: r["links"][0].pop("link_params"), r"links\[0\]: missing field 'link_params'"),
        (lambda r: r.pop("nodes"), "missing field 'nodes'"),
        (lambda r: r.update(trusted_nodes=["ZZ"]), "trusted_nodes"),
    ],
)
def test_diagnostics_name_the_field(mutate, where):
    raw = raw_preset()
    mutate(raw)
    with pytest.raises(ConfigError, match=where):
        parse_config(raw)


def test_json_syntax_error_has_position(tmp_path):
    f = tmp_path / "bad.json"
    f.write_text('{"nodes": ["A",\n  ]\n')
    with pytest.raises(ConfigError, match=r"bad\.json:\d+:\d+"):
        load_config(f)
    with pytest.raises(ConfigError, match="missing.json"):
        load_config(tmp_path / "missing.json")
