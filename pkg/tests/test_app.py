import base64
import io

import numpy as np
import pytest
from PIL import Image

from app import app
from lib.raster import ImageBuffer, to_pil


@pytest.fixture
def client():
    app.config['TESTING'] = True
    with app.test_client() as client:
        yield client


def png(image):
    buffer = io.BytesIO()
    to_pil(image).save(buffer, format='PNG')
    buffer.seek(0)
    return buffer


def test_metrics_identical_images(client, make_image):
    image = make_image(64, 48)
    response = client.post('/api/metrics', data={
        'pred': (png(image), 'pred.png'),
        'gt': (png(image), 'gt.png'),
    }, content_type='multipart/form-data')
    assert response.status_code == 200
    assert response.get_json()['psnr'] == 99.0
    assert response.get_json()['ssim'] == pytest.approx(1.0)


def test_metrics_missing_upload(client, make_image):
    response = client.post('/api/metrics', data={'pred': (png(make_image(64, 48)), 'pred.png')},
                           content_type='multipart/form-data')
    assert response.status_code == 400
    assert "'gt'" in response.get_json()['details']


def test_metrics_unreadable_upload(client, make_image):
    response = client.post('/api/metrics', data={
        'pred': (io.BytesIO(b'not a png'), 'pred.png'),
        'gt': (png(make_image(64, 48)), 'gt.png'),
    }, content_type='multipart/form-data')
    assert response.status_code == 400


def test_rectangle_endpoint(client, make_image):
    image = make_image(64, 48)
    mask = np.ones((48, 64))
    mask[:, :6] = 0.0
    response = client.post('/api/rectangle', data={
        'image': (png(image), 'image.png'),
        'mask': (png(ImageBuffer(mask)), 'mask.png'),
        'label': (png(image), 'label.png'),
        'mesh': '4x3',
        'iters': '10',
    }, content_type='multipart/form-data')
    assert response.status_code == 200
    body = response.get_json()
    result = Image.open(io.BytesIO(base64.b64decode(body['image'])))
    assert result.size == (64, 48)
    assert set(body['report']) == {'energy', 'iterations', 'converged', 'metrics'}


def test_rectangle_size_mismatch(client, make_image):
    response = client.post('/api/rectangle', data={
        'image': (png(make_image(64, 48)), 'image.png'),
        'mask': (png(ImageBuffer(np.ones((24, 32)))), 'mask.png'),
    }, content_type='multipart/form-data')
    assert response.status_code == 400


def test_rectangle_bad_mesh(client, make_image):
    response = client.post('/api/rectangle', data={
        'image': (png(make_image(64, 48)), 'image.png'),
        'mask': (png(ImageBuffer(np.ones((48, 64)))), 'mask.png'),
        'mesh': 'eight',
    }, content_type='multipart/form-data')
    assert response.status_code == 400
