import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from offnet import network as net
from offnet import tensor as T
from offnet.checkpoint import BLOB, MANIFEST, load_checkpoint, save_checkpoint
from offnet.errors import FormatError

SMALL = net.OffConfig(levels=2, reduced_channels=2, blocks_per_level=1, backbone_channels=(3, 4), trunk_channels=4)


def random_params(seed=0):
    rng = np.random.default_rng(seed)
    return {k: rng.normal(size=v.shape).astype(np.float32) for k, v in net.init_params(SMALL, seed).items()}


def test_round_trip_is_bit_exact(tmp_path):
    params = random_params()
    save_checkpoint(params, tmp_path / "ck", {"levels": "2"}, iteration=17)
    ck = load_checkpoint(tmp_path / "ck", expected=params)
    assert ck.iteration == 17 and ck.config == {"levels": "2"}
    assert list(ck.params) == list(params)
    for k, v in params.items():
        assert ck.params[k].tobytes() == v.tobytes()
        assert ck.params[k].shape == v.shape


def test_save_load_save_gives_identical_bytes(tmp_path):
    save_checkpoint(random_params(1), tmp_path / "a", {"seed": "1"}, 3)
    ck = load_checkpoint(tmp_path / "a")
    save_checkpoint(ck.params, tmp_path / "b", ck.config, ck.iteration)
    for name in (MANIFEST, BLOB):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_forward_after_reload_is_bit_identical(tmp_path):
    params = {k: T.Tensor(v) for k, v in random_params(2).items()}
    save_checkpoint(params, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck").tensors(False)
    rng = np.random.default_rng(0)
    segs = [T.Tensor(rng.random((2, 1, 8, 8)).astype(np.float32)) for _ in range(3)]
    a = net.network_forward(segs, params, SMALL)
    b = net.network_forward(segs, loaded, SMALL)
    for x, y in zip([a.rgb, *a.off], [b.rgb, *b.off]):
        assert x.data.tobytes() == y.data.tobytes()


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_arbitrary_arrays_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("ck")
    save_checkpoint({"x": arr, "y": arr[..., :1]}, path)
    back = load_checkpoint(path).params
    assert back["x"].tobytes() == arr.tobytes()
    assert back["y"].tobytes() == np.ascontiguousarray(arr[..., :1]).tobytes()


def test_truncated_blob_names_the_entry(tmp_path):
    params = random_params()
    save_checkpoint(params, tmp_path)
    blob = tmp_path / BLOB
    blob.write_bytes(blob.read_bytes()[:-8])
    last = list(params)[-1]
    with pytest.raises(FormatError, match=last.replace(".", r"\.")):
        load_checkpoint(tmp_path)


def test_missing_expected_parameter(tmp_path):
    params = random_params()
    save_checkpoint(params, tmp_path)
    with pytest.raises(FormatError, match="missing"):
        load_checkpoint(tmp_path, expected=[*params, "off.l9.fc.w"])


@pytest.mark.parametrize(
    "edit",
    [
        lambda lines: ["bogus header", *lines[1:]],
        lambda lines: [l for l in lines if not l.startswith("params ")],
        lambda lines: lines[:-1],
        lambda lines: [*lines[:-1], lines[-1].rsplit(" ", 1)[0] + " 4"],
        lambda lines: [*lines[:-1], lines[-1].replace("float32", "float16")],
        lambda lines: [*lines, "garbage here"],
    ],
    ids=["magic", "no-count", "count-mismatch", "bad-offset", "dtype", "unknown-line"],
)
def test_corrupt_manifest(tmp_path, edit):
    save_checkpoint(random_params(), tmp_path)
    manifest = tmp_path / MANIFEST
    manifest.write_text("\n".join(edit(manifest.read_text().splitlines())) + "\n")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)


def test_trailing_bytes_and_missing_dir(tmp_path):
    save_checkpoint(random_params(), tmp_path / "ck")
    with open(tmp_path / "ck" / BLOB, "ab") as fh:
        fh.write(b"\0\0\0\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "nowhere")


def test_config_values_with_newlines_are_refused(tmp_path):
    with pytest.raises(FormatError):
        save_checkpoint(random_params(), tmp_path, {"note": "a\nb"})
