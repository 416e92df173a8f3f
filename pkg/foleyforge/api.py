import functools
import inspect
import json
import os
import sys
import traceback

import numpy as np
import werkzeug
import werkzeug.routing
from werkzeug.exceptions import NotFound, UnprocessableEntity, UnsupportedMediaType

from . import __version__
from .avprpo import mean_score, score_candidate, score_spectrogram
from .settings import REWARD_MODES
from .sfcavp import load_avp
from .storage import load_array
from .synthdata import load_manifest


class API:
    """Minimal JSON API.

    >>> app = API()
    >>> @app.GET("/")
    ... def root(request):
    ...     return "Hello"
    ...
    >>> from werkzeug.test import Client
    >>> Client(app).get("/").get_json()
    'Hello'

    A handler with a `data` parameter receives the parsed JSON body, checked
    against the parameter's annotation (default dict).

    >>> @app.POST("/echo")
    ... def echo(request, data: list):
    ...     return data
    ...
    >>> Client(app).post("/echo", data="[1, 2]").get_json()
    [1, 2]
    >>> Client(app).post("/echo", data="{}").status
    '422 UNPROCESSABLE ENTITY'
    """

    def __init__(self):
        self._url_map = werkzeug.routing.Map()

    def route(self, string, methods=("GET",), func=None):
        if func is None:
            return functools.partial(self.route, string, methods)
        params = inspect.signature(func).parameters
        if "data" in params:
            annotation = params["data"].annotation
            body_type = dict if annotation is inspect.Parameter.empty else annotation
            func = _json_body(func, body_type)
        self._url_map.add(werkzeug.routing.Rule(string, methods=methods, endpoint=func))
        return func

    def GET(self, string):
        return self.route(string, ("GET",))

    def POST(self, string):
        return self.route(string, ("POST",))

    def __call__(self, environ, start_response):
        try:
            request = werkzeug.Request(environ)
            endpoint, values = self._url_map.bind_to_environ(environ).match()
            response = _json_response(endpoint(request, **values))
        except werkzeug.exceptions.HTTPException as e:
            response = _json_response(
                {"code": e.code, "name": e.name, "description": e.description},
                status=e.code,
            )
        except Exception as e:
            response = _json_response(
                {"code": 500, "name": "Internal Server Error"}, status=500
            )
            print(f"ERROR {e.__class__.__name__}: {str(e)}", file=sys.stderr)
            traceback.print_exc(file=sys.stderr)
        return response(environ, start_response)


def _json_response(data, status=200):
    if data is None:
        return werkzeug.Response(status=status)
    data = json.dumps(data, indent=2) + "\n"
    return werkzeug.Response(data, status=status, mimetype="application/json")


def _json_body(func, body_type):
    @functools.wraps(func)
    def wrapper(request, *args, **kwargs):
        try:
            data = json.loads(str(request.data, "utf-8"))
        except UnicodeDecodeError:
            raise UnsupportedMediaType("Cannot parse request body: invalid UTF-8 data")
        except json.decoder.JSONDecodeError:
            raise UnsupportedMediaType("Cannot parse request body: invalid JSON")
        if not isinstance(data, body_type):
            raise UnprocessableEntity(
                f"Invalid data format: {body_type.__name__} expected"
            )
        return func(request, *args, data=data, **kwargs)

    return wrapper


def scoring_api(avp_path, data_dir, reward="order_stat"):
    """Read-only reward scoring service over a frozen encoder and a dataset.

    Scores are computed without gradients against the frozen encoder, so
    concurrent requests are safe.
    """
    if reward not in REWARD_MODES:
        raise UnprocessableEntity(f"Unknown reward: {reward}")
    avp_model, header = load_avp(avp_path)
    manifest = load_manifest(data_dir)
    cfg = {"data": manifest["config"]}
    entries = {entry["clip_id"]: entry for entry in manifest["clips"]}

    def _entry(clip_id):
        if clip_id not in entries:
            raise NotFound(f"Clip '{clip_id}' not found")
        return entries[clip_id]

    def _arrays(clip_id):
        base = os.path.join(data_dir, "clips", clip_id)
        return load_array(base + ".video.npy"), load_array(base + ".audio.npy")

    def _response(clip_id, mode, score):
        return {
            "clip_id": clip_id,
            "reward": mode,
            "per_segment": score.per_segment,
            "s_fs": score.s_fs,
            "alignment": mean_score(score.per_segment),
        }

    api = API()

    @api.GET("/")
    def root(request):
        return {
            "service": f"foleyforge reward scoring {__version__}",
            "avp": header["config_hash"],
            "dataset": manifest["content_hash"],
            "reward": reward,
        }

    @api.GET("/clips/")
    def clips(request):
        return [
            {"clip_id": entry["clip_id"], "split": entry["split"]}
            for entry in manifest["clips"]
        ]

    @api.GET("/clips/<clip_id>")
    def clip(request, clip_id):
        return _entry(clip_id)

    @api.GET("/score/<clip_id>")
    def score_ground_truth(request, clip_id):
        _entry(clip_id)
        video, audio = _arrays(clip_id)
        score = score_spectrogram(avp_model, video, audio, cfg, reward)
        return _response(clip_id, reward, score)

    @api.POST("/score/<clip_id>")
    def score_latent(request, clip_id, data):
        _entry(clip_id)
        unknown = sorted(set(data) - {"latent", "reward"})
        if unknown:
            raise UnprocessableEntity(f"Key not allowed: {', '.join(unknown)}")
        if "latent" not in data:
            raise UnprocessableEntity("Key missing: latent")
        mode = data.get("reward", reward)
        if mode not in REWARD_MODES:
            raise UnprocessableEntity(f"Unknown reward: {mode}")
        try:
            latent = np.asarray(data["latent"], dtype=np.float32)
        except (TypeError, ValueError):
            raise UnprocessableEntity("Invalid latent: nested list of numbers expected")
        if latent.ndim != 2 or not np.isfinite(latent).all():
            raise UnprocessableEntity("Invalid latent: finite (L, d) array expected")
        video, _ = _arrays(clip_id)
        return _response(
            clip_id, mode, score_candidate(avp_model, video, latent, cfg, mode)
        )

    return api
