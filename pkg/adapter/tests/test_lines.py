from tikzsmith_adapter.lines import split_generated_text


class TestSplitGeneratedText:
    def test_complete_lines_served(self):
        batch = split_generated_text("a\nb\nc\n", eos_reached=False, max_new_lines=5)
        assert batch.lines == ["a", "b", "c"]
        assert not batch.eos

    def test_partial_line_held_back_without_eos(self):
        batch = split_generated_text("a\nb\npartial", eos_reached=False, max_new_lines=5)
        # budget ran out mid-line: flush rather than stall
        assert batch.lines == ["a", "b", "partial"]
        assert not batch.eos

    def test_eos_flushes_trailing_fragment(self):
        batch = split_generated_text("a\ntail", eos_reached=True, max_new_lines=5)
        assert batch.lines == ["a", "tail"]
        assert batch.eos

    def test_line_budget_caps_and_defers_eos(self):
        batch = split_generated_text("a\nb\nc\n", eos_reached=True, max_new_lines=2)
        assert batch.lines == ["a", "b"]
        assert not batch.eos  # more scripted lines remain beyond the budget

    def test_eos_exactly_at_budget(self):
        batch = split_generated_text("a\nb\n", eos_reached=True, max_new_lines=2)
        assert batch.lines == ["a", "b"]
        assert batch.eos

    def test_empty_with_eos(self):
        batch = split_generated_text("", eos_reached=True, max_new_lines=3)
        assert batch.lines == []
        assert batch.eos

    def test_carriage_returns_normalized(self):
        batch = split_generated_text("a\r\nb\rc\n", eos_reached=False, max_new_lines=5)
        assert batch.lines == ["a", "b", "c"]
        assert all("\r" not in ln and "\n" not in ln for ln in batch.lines)
