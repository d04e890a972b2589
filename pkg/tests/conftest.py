import numpy as np
import pytest
from PIL import Image

# First five rows of the canonical text-database export, used as fixtures.
TABLE1_HEADER = "length,maturity,cruise,x,y,width,height,ID,Alternative view ID,position,event,net,board"
TABLE1_ROWS = [
    "34,FS1,JR255A,469,751,869,114,JR255A_krill_image_73.jpeg-1,JR255A_krill_image_74.jpeg-1,Dorsal,78,2,3",
    "23,J,JR255A,1368,869,537,118,JR255A_krill_image_73.jpeg-2,JR255A_krill_image_74.jpeg-2,Dorsal,78,2,3",
    "25,J,JR255A,2207,851,560,123,JR255A_krill_image_73.jpeg-3,JR255A_krill_image_74.jpeg-3,Dorsal,78,2,3",
    "29,J,JR255A,3172,819,746,168,JR255A_krill_image_73.jpeg-4,JR255A_krill_image_74.jpeg-4,Dorsal,78,2,3",
    "40,MS1,JR255A,4319,783,1038,191,JR255A_krill_image_73.jpeg-5,JR255A_krill_image_74.jpeg-5,Dorsal,78,2,3",
]


@pytest.fixture(scope="session")
def table1_csv() -> str:
    return "\n".join([TABLE1_HEADER] + TABLE1_ROWS) + "\n"


@pytest.fixture(scope="session")
def table1_boards_dir(tmp_path_factory):
    """Full-resolution solid-colour stand-ins for the referenced board photos."""
    d = tmp_path_factory.mktemp("table1_boards")
    img = Image.new("RGB", (6048, 4032), (56, 127, 245))
    img.save(d / "JR255A_krill_image_73.jpeg", quality=30)
    img.save(d / "JR255A_krill_image_74.jpeg", quality=30)
    return d


def make_board(tmp_dir, name, size=(400, 300), color=(56, 127, 245)):
    path = tmp_dir / name
    Image.new("RGB", size, color).save(path)
    return path


@pytest.fixture()
def small_boards_dir(tmp_path):
    d = tmp_path / "boards"
    d.mkdir()
    for i in (1, 2, 3, 4):
        make_board(d, f"AB1_krill_image_{i}.png")
    return d


def small_row(length=30, maturity="J", cruise="AB1", bbox=(10, 20, 50, 30),
              image=1, alt_image=2, index=1, view="Dorsal", event=7, net=1, board=2):
    x, y, w, h = bbox
    sid = f"{cruise}_krill_image_{image}.png-{index}"
    aid = f"{cruise}_krill_image_{alt_image}.png-{index}"
    return f"{length},{maturity},{cruise},{x},{y},{w},{h},{sid},{aid},{view},{event},{net},{board}"


def rows_to_csv(rows) -> str:
    return "\n".join([TABLE1_HEADER] + list(rows)) + "\n"
