"""
JSON endpoints over the serving planner and the real-time ranker
"""

import json
import logging
from functools import lru_cache
from pathlib import Path

from django.conf import settings
from django.http import JsonResponse
from django.views.decorators.csrf import csrf_exempt
from django.views.decorators.http import require_http_methods

from .config import RunConfig
from .datasynth import load_world
from .exceptions import SeqrankError
from .realtime import load_models, rank_candidates
from .serving import (
    TransferModel,
    evaluate_named_plans,
    parse_graph,
    search_placement,
)

logger = logging.getLogger(__name__)


def index(request):
    """Basic info about the service"""
    return JsonResponse({
        'message': 'seqrank - sequential user representations for retrieval and ranking',
        'endpoints': [
            '/api/plan/?mode=named|search&overhead=U&bw=B - Serving placement report',
            '/api/rank/ (POST) - Rank candidate pins for a user',
        ]
    })


@require_http_methods(["GET"])
def plan(request):
    """Named placements or the searched optimum for the configured operator graph"""
    mode = request.GET.get('mode', 'named')
    if mode not in ('named', 'search'):
        return JsonResponse({'error': f"unknown mode {mode!r}; use named or search"}, status=400)
    try:
        defaults = settings.SEQRANK_RUN_DEFAULTS
        transfer = TransferModel(
            overhead_us=float(request.GET.get('overhead', defaults['transfer_overhead_us'])),
            bandwidth=float(request.GET.get('bw', defaults['transfer_bandwidth'])),
            coalesce_transfers=defaults['coalesce_transfers'],
        )
        graph = parse_graph(settings.SEQRANK_PLAN_GRAPH)
        if mode == 'named':
            rows = evaluate_named_plans(graph, transfer)
            return JsonResponse({
                'mode': mode,
                'plans': [
                    {
                        'name': row.name,
                        'description': row.description,
                        'latency_us': row.latency_us,
                        'increase_pct': row.increase_pct,
                    }
                    for row in rows
                ],
            })
        result = search_placement(graph, transfer, budget=defaults['search_budget'])
        return JsonResponse({
            'mode': mode,
            'search': result.mode,
            'latency_us': result.latency_us,
            'evaluated': result.evaluated,
            'truncated': result.truncated,
            'placement': {node_id: device.value for node_id, device in result.placement.items()},
        })
    except ValueError as e:
        return JsonResponse({'error': str(e)}, status=400)
    except Exception as e:
        logger.exception(f"plan failed: {e}")
        return JsonResponse({'error': str(e)}, status=500)


@lru_cache(maxsize=4)
def serving_state(checkpoint: str, corpus_dir: str):
    """Config, tower, ranker and corpus for one (checkpoint, corpus) pair, loaded once per process."""
    run_cfg = Path(checkpoint).with_name('run.cfg')
    cfg = RunConfig.resolve(run_cfg if run_cfg.exists() else None)
    tower, ranker = load_models(cfg, checkpoint)
    return cfg, tower, ranker, load_world(corpus_dir)


@csrf_exempt
@require_http_methods(["POST"])
def rank(request):
    """Rank candidate pins for a user; body {"user_id", "candidates", "request_time"?, "tmask"?}"""
    checkpoint = settings.SEQRANK_SERVING_CHECKPOINT
    corpus_dir = settings.SEQRANK_SERVING_CORPUS
    if not checkpoint or not corpus_dir:
        return JsonResponse({'error': 'ranking is not configured on this server'}, status=503)

    try:
        body = json.loads(request.body or b'{}')
        user_id = int(body['user_id'])
        candidates = [int(pin) for pin in body['candidates']]
        request_time = body.get('request_time')
        request_time = int(request_time) if request_time is not None else None
        t_mask = body.get('tmask')
        t_mask = float(t_mask) if t_mask is not None else None
    except (ValueError, TypeError, KeyError) as e:
        return JsonResponse({'error': f"bad request body: {e}"}, status=400)

    try:
        cfg, tower, ranker, world = serving_state(str(checkpoint), str(corpus_dir))
    except (SeqrankError, OSError) as e:
        logger.error(f"serving state unavailable: {e}")
        return JsonResponse({'error': f"serving state unavailable: {e}"}, status=503)

    try:
        ranked = rank_candidates(ranker, tower, world, user_id, candidates, request_time=request_time,
                                 t_mask=t_mask, window_days=cfg['ranker_window_days'])
    except SeqrankError as e:
        return JsonResponse({'error': str(e)}, status=400)
    except Exception as e:
        logger.exception(f"rank failed for user {user_id}: {e}")
        return JsonResponse({'error': str(e)}, status=500)

    return JsonResponse({
        'user_id': user_id,
        'ranked': [{'pin_id': pin_id, 'score': score} for pin_id, score in ranked],
    })
