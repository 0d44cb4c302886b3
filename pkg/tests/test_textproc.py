import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from echolab.textproc import fnv1a64, hash_attr, hash_rows, shape_of, tokenize


class TestTokenize:
    def test_peels_punctuation(self):
        doc = tokenize("LVEF 45%, mitralisklep-insufficientie graad 3/4.")
        assert [t.text for t in doc] == ["LVEF", "45", "%", ",", "mitralisklep-insufficientie",
                                         "graad", "3/4", "."]

    def test_attributes(self):
        tok = tokenize("AoS")[0]
        assert (tok.norm, tok.prefix, tok.suffix, tok.shape) == ("aos", "A", "AoS", "XxX")

    def test_token_range(self):
        doc = tokenize("Milde AI. Goede LV functie")
        assert doc.token_range(0, 8) == (0, 2)
        assert doc.token_range(8, 9) == (2, 3)
        assert doc.token_range(100, 120) == (0, 0)
        assert doc.char_span(3, 6) == (10, 26)

    @given(st.text(alphabet=st.sampled_from(list("ab1 .,-/%\n\tXY")), max_size=60))
    def test_offsets_roundtrip(self, text):
        """Tokens are ordered, non-empty, non-overlapping and cover exactly the non-space text."""
        doc = tokenize(text)
        last = 0
        for t in doc:
            assert t.start >= last and t.end > t.start
            assert text[t.start:t.end] == t.text
            last = t.end
        covered = "".join(t.text for t in doc)
        assert covered == "".join(text.split())


class TestShapeAndHash:
    def test_shape_runs(self):
        assert shape_of("Insufficientie") == "Xxxxx"
        assert shape_of("2023-01") == "dddd-dd"

    def test_fnv_reference(self):
        # standard 64-bit FNV-1a of "a" with an all-zero 4-byte salt prefix
        h = 0xCBF29CE484222325
        for b in b"\0\0\0\0a":
            h = ((h ^ b) * 0x100000001B3) % 2**64
        assert fnv1a64(b"a") == h

    def test_tables_differ(self):
        assert hash_attr("lv", 0, 10**6) != hash_attr("lv", 1, 10**6)

    def test_rows_shape_and_range(self):
        rows = hash_rows(tokenize("Goede LV functie"), (50, 10, 20, 20))
        assert rows.shape == (3, 4)
        assert (rows < np.array([50, 10, 20, 20])).all() and (rows >= 0).all()
