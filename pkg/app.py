#!/usr/bin/env python3
"""
Flask JSON API for the Image Rectangling Tool.
"""

import base64
import io

from flask import Flask, jsonify, request

from lib.config import ConfigError, EnergyConfig, OptimizerSettings, parse_resolution
from lib.metrics import psnr, ssim
from lib.optimizer import NumericalError, rectangle_image
from lib.raster import RasterError, load_image, load_mask, to_pil
from lib.warp import WarpError

app = Flask(__name__)
app.config['MAX_CONTENT_LENGTH'] = 64 * 1024 * 1024


def _upload(name: str, loader=load_image, required: bool = True):
    upload = request.files.get(name)
    if upload is None or not upload.filename:
        if required:
            raise ValueError(f"'{name}' PNG upload is required")
        return None
    return loader(upload.stream)


def _flag(name: str) -> bool:
    return request.form.get(name, '').strip().lower() in ('1', 'true', 'yes', 'on')


def _energy_config() -> EnergyConfig:
    form = request.form
    u, v = parse_resolution(form.get('mesh', '8x6'))
    optimizer = OptimizerSettings(
        step=float(form.get('step', 0.5)),
        iterations=int(form.get('iters', 300)),
    )
    return EnergyConfig(mesh_u=u, mesh_v=v, optimizer=optimizer,
                        omega_a=float(form.get('wa', 1.0)),
                        omega_p=float(form.get('wp', 5e-6)),
                        alpha=float(form.get('alpha', 0.125)))


def _png_base64(image) -> str:
    buffer = io.BytesIO()
    to_pil(image).save(buffer, format='PNG')
    return base64.b64encode(buffer.getvalue()).decode('ascii')


@app.route('/api/metrics', methods=['POST'])
def metrics():
    """PSNR and SSIM between two uploaded PNGs."""
    try:
        pred = _upload('pred')
        gt = _upload('gt')
        return jsonify({'psnr': psnr(pred, gt), 'ssim': ssim(pred, gt)}), 200

    except (ConfigError, ValueError) as e:
        return jsonify({
            'error': 'Invalid request',
            'details': str(e)
        }), 400

    except Exception as e:
        return jsonify({
            'error': 'Internal server error',
            'details': str(e)
        }), 500


@app.route('/api/rectangle', methods=['POST'])
def rectangle():
    """Rectangle an uploaded stitched image; returns the result as base64 PNG plus the solver report."""
    try:
        image = _upload('image')
        mask = _upload('mask', load_mask)
        label = _upload('label', required=False)
        cfg = _energy_config()

        output, result = rectangle_image(
            image, mask, cfg,
            label=None if _flag('label_free') else label,
            downsample=_flag('downsample'),
        )
        report = result.to_dict()
        if label is not None:
            report['metrics'] = {'psnr': psnr(output, label), 'ssim': ssim(output, label)}

        return jsonify({'image': _png_base64(output), 'report': report}), 200

    except (WarpError, NumericalError) as e:
        return jsonify({
            'error': 'Numerical failure',
            'details': str(e)
        }), 422

    except (ConfigError, RasterError, ValueError) as e:
        return jsonify({
            'error': 'Invalid request',
            'details': str(e)
        }), 400

    except Exception as e:
        return jsonify({
            'error': 'Internal server error',
            'details': str(e)
        }), 500


if __name__ == '__main__':
    print("Starting Image Rectangling API...")
    print("POST PNG uploads to http://localhost:5000/api/rectangle")
    app.run(debug=True, host='0.0.0.0', port=5000)
