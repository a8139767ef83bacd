import io

import pytest
from PIL import Image


class FakeClock:
    """Deterministic monotonic clock; advances a fixed tick per reading."""

    def __init__(self, tick: float = 0.0, start: float = 0.0):
        self.t = start
        self.tick = tick

    def __call__(self) -> float:
        value = self.t
        self.t += self.tick
        return value


def png_bytes(image: Image.Image) -> bytes:
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture
def fake_clock():
    return FakeClock()


@pytest.fixture
def white_image():
    return Image.new("L", (64, 64), 255)


@pytest.fixture
def half_image():
    img = Image.new("L", (64, 64), 255)
    img.paste(0, (0, 0, 32, 64))
    return img


@pytest.fixture
def checker_image():
    img = Image.new("L", (64, 64), 255)
    for x in range(64):
        for y in range(64):
            if (x // 8 + y // 8) % 2 == 0:
                img.putpixel((x, y), 0)
    return img


@pytest.fixture
def checker_png(checker_image):
    return png_bytes(checker_image)
