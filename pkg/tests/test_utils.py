import pytest

from adaptive_sense import utils


@pytest.mark.parametrize(
    "dir,path,expected",
    [
        ("/topdir", "subdir", "/topdir/subdir"),
        ("/topdir", "/root", "/root"),
        ("/topdir", None, None),
        ("/topdir", "", None),
    ]
)
def test_relative_to(dir, path, expected):
    assert utils.relative_to(dir, path) == expected


@pytest.mark.parametrize(
    "value,expected",
    [
        pytest.param(None, 1, id="unset"),
        pytest.param("4", 4, id="four"),
        pytest.param("0", 1, id="zero"),
        pytest.param("many", 1, id="invalid"),
    ],
)
def test_thread_count(monkeypatch, value, expected):
    if value is None:
        monkeypatch.delenv("ADAPTIVE_SENSE_THREADS", raising=False)
    else:
        monkeypatch.setenv("ADAPTIVE_SENSE_THREADS", value)
    assert utils.thread_count() == expected


@pytest.mark.parametrize(
    "content,hash",
    [
        ("", "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"),
        ("hello\n", "5891b5b522d5df086d0ff0b110fbd9d21bb4fc7163af34d08286a2e846f6be03"),
    ],
)
def test_hash_file(content, hash, tmp_path):
    fn = tmp_path / "something"
    fn.write_text(content, encoding="utf-8")
    assert utils.hash_file(fn) == hash


def test_hash_inputs(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.write_text("first", encoding="utf-8")
    b.write_text("second", encoding="utf-8")
    digest = utils.hash_inputs([a, b], "idx", 16)
    assert digest == utils.hash_inputs([a, b], "idx", 16)
    assert digest != utils.hash_inputs([b, a], "idx", 16)
    assert digest != utils.hash_inputs([a, b], "idx", 32)
    b.write_text("changed", encoding="utf-8")
    assert digest != utils.hash_inputs([a, b], "idx", 16)
