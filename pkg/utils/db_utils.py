"""
Registry query helpers for the FedHAR simulator
"""
import pandas as pd
from sqlalchemy import create_engine, text


def get_engine(url):
    """Get SQLAlchemy engine"""
    return create_engine(url)


def get_runs(url, arm=None, seed=None, limit=None):
    """Get registered runs, newest first"""
    engine = get_engine(url)

    query = """
        SELECT id, arm, seed, rounds, n_clients, model_bytes, macro_f1,
               per_dataset_json, code_version, output_dir, created_at
        FROM experiment_runs
        WHERE 1=1
    """
    params = {}

    if arm:
        query += " AND arm = :arm"
        params['arm'] = arm

    if seed is not None:
        query += " AND seed = :seed"
        params['seed'] = seed

    query += " ORDER BY created_at DESC, id DESC"

    if limit:
        query += " LIMIT :limit"
        params['limit'] = int(limit)

    return pd.read_sql(text(query), engine, params=params)


def get_round_metrics(url, run_id):
    """Get the round telemetry of one run"""
    engine = get_engine(url)
    query = """
        SELECT round, client_loss_mean, client_loss_std, server_loss, bytes_down, bytes_up
        FROM round_metrics
        WHERE run_id = :run_id
        ORDER BY round
    """
    return pd.read_sql(text(query), engine, params={'run_id': run_id})


def get_arm_summary(url):
    """Best and mean combined macro-F1 per arm"""
    engine = get_engine(url)
    query = """
        SELECT arm,
               COUNT(*) as runs,
               MAX(macro_f1) as best_macro_f1,
               AVG(macro_f1) as mean_macro_f1
        FROM experiment_runs
        GROUP BY arm
        ORDER BY arm
    """
    return pd.read_sql(text(query), engine)
