import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from app import create_app
from domain import DetectionBox, InstanceId, InstanceLabeling, Stixel, StixelFrame, default_class_table
from services.filter_service import build_sample, scale_box

PERSON, RIDER, CAR, TRUCK, BUS, TRAIN, MOTORCYCLE, BICYCLE, BACKGROUND_CLASS = range(9)


def make_stixel(stixel_id, u_tl, v_tl, u_br, v_br, label=CAR, x=None, z=10.0, label_conf=0.9):
    """Stixel with consistent but arbitrary world values; x defaults to the column center."""
    if x is None:
        x = (u_tl + u_br) / 200.0
    return Stixel(x=float(x), y=0.0, z=float(z), w=(u_br - u_tl) / 100.0, h=(v_br - v_tl) / 100.0,
                  u_tl=float(u_tl), v_tl=float(v_tl), u_br=float(u_br), v_br=float(v_br),
                  label=label, label_conf=label_conf, stixel_id=stixel_id)


def make_frame(stixels, width=200, height=100, frame_id='f0'):
    return StixelFrame(frame_id, width, height, tuple(stixels))


def make_sample(frame, box, class_table=None, roi_index=0):
    """RoiSample capturing every Stixel of the frame inside an unscaled RoI around box."""
    class_table = class_table or default_class_table()
    roi = scale_box(box, 1.0, (frame.width, frame.height))
    return build_sample(frame, roi, sorted(frame.stixel_ids), class_table, roi_index)


@pytest.fixture
def class_table():
    return default_class_table()


@pytest.fixture
def two_car_frame():
    """Two cars of four and two Stixels plus two background Stixels."""
    stixels = [
        make_stixel(0, 10, 20, 20, 80, CAR, z=10.0),
        make_stixel(1, 20, 20, 30, 80, CAR, z=10.0),
        make_stixel(2, 30, 20, 40, 80, CAR, z=10.0),
        make_stixel(3, 40, 20, 50, 80, CAR, z=10.0),
        make_stixel(4, 120, 30, 130, 70, CAR, z=25.0),
        make_stixel(5, 130, 30, 140, 70, CAR, z=25.0),
        make_stixel(6, 60, 80, 70, 100, BACKGROUND_CLASS, z=8.0),
        make_stixel(7, 160, 80, 170, 100, BACKGROUND_CLASS, z=8.0),
    ]
    frame = make_frame(stixels)
    gt = InstanceLabeling('f0', {
        0: InstanceId(CAR, 1), 1: InstanceId(CAR, 1), 2: InstanceId(CAR, 1), 3: InstanceId(CAR, 1),
        4: InstanceId(CAR, 2), 5: InstanceId(CAR, 2),
        6: InstanceId(-1, -1), 7: InstanceId(-1, -1),
    })
    boxes = [
        DetectionBox(10, 20, 50, 80, box_label=CAR, box_conf=0.9),
        DetectionBox(120, 30, 140, 70, box_label=CAR, box_conf=0.8),
    ]
    return frame, gt, boxes


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def app():
    return create_app({'TESTING': True, 'LOG_LEVEL': 'WARNING'})


@pytest.fixture
def runner(app):
    return app.test_cli_runner()
