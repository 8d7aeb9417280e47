import sqlite3
import sys
from typing import List

import pandas as pd

COLUMNS = (
    ("sweep", "TEXT"),
    ("parameter", "TEXT"),
    ("value", "REAL"),
    ("mode", "TEXT"),
    ("realization", "INTEGER"),
    ("scenario_seed", "INTEGER"),
    ("channel_seed", "INTEGER"),
    ("status", "TEXT"),
    ("total_power_w", "REAL"),
    ("admitted", "INTEGER"),
    ("requested", "INTEGER"),
    ("iterations", "INTEGER"),
)


def store_records(records: List[dict], db_path: str, table: str = "realizations") -> int:
    """
    Stores per-realization records into an SQLite database, replacing the table.

    Parameters:
        records (list of dict): Output of RealizationRecord.to_dict.
        db_path (str): Database file.
        table (str): Table name.

    Returns:
        int: Number of rows inserted.
    """
    if not records:
        print("No records to store.")
        return 0

    rows = []
    for item in records:
        try:
            rows.append(tuple(item[name] for name, _ in COLUMNS))
        except KeyError as e:
            print(f"Error processing record {item}: missing {e}")

    if not rows:
        print("No records to insert.")
        return 0

    conn = sqlite3.connect(db_path)
    try:
        cursor = conn.cursor()
        cursor.execute(f"DROP TABLE IF EXISTS {table}")
        schema = ", ".join(f"{name} {kind}" for name, kind in COLUMNS)
        cursor.execute(f"CREATE TABLE {table} (id INTEGER PRIMARY KEY AUTOINCREMENT, {schema})")
        names = ", ".join(name for name, _ in COLUMNS)
        marks = ", ".join("?" for _ in COLUMNS)
        cursor.executemany(f"INSERT INTO {table} ({names}) VALUES ({marks})", rows)
        conn.commit()
        print(f"Inserted {len(rows)} records into {db_path}.")
        return len(rows)
    except sqlite3.Error as e:
        print(f"Error inserting records into the database: {e}")
        return 0
    finally:
        conn.close()


def load_records(db_path: str, table: str = "realizations") -> pd.DataFrame:
    """Reads a stored table back; an empty frame when the table is missing"""
    conn = sqlite3.connect(db_path)
    try:
        return pd.read_sql_query(f"SELECT * FROM {table}", conn)
    except (sqlite3.Error, pd.errors.DatabaseError) as e:
        print(f"Error reading {table} from {db_path}: {e}")
        return pd.DataFrame()
    finally:
        conn.close()


def describe_database(db_path: str):
    """
    Prints every table of a results database with its row count, its columns
    and, for realization tables, how many runs each sweep point holds.
    """
    conn = sqlite3.connect(db_path)
    try:
        tables = [name for (name,) in conn.execute(
            "SELECT name FROM sqlite_master WHERE type='table' AND name NOT LIKE 'sqlite_%';")]
        print(f"Database {db_path}: {len(tables)} table(s)\n")
        for table_name in tables:
            count = conn.execute(f"SELECT COUNT(*) FROM {table_name};").fetchone()[0]
            print(f"Table: {table_name}")
            print(f"Number of records: {count}")
            columns = conn.execute(f"PRAGMA table_info({table_name});").fetchall()
            print("Columns: " + ", ".join(f"{name} {kind}" for _, name, kind, *_ in columns))
            names = {name for _, name, *_ in columns}
            if {"sweep", "value", "mode"} <= names:
                for sweep, value, mode, runs in conn.execute(
                        f"SELECT sweep, value, mode, COUNT(*) FROM {table_name} "
                        "GROUP BY sweep, value, mode ORDER BY sweep, value, mode;"):
                    print(f"  {sweep} {value:g} {mode}: {runs} run(s)")
            print()
    except sqlite3.Error as e:
        print(f"Error describing {db_path}: {e}")
    finally:
        conn.close()


def view_records(db_path: str, table: str = "realizations", limit: int = 5):
    """Prints the first rows of a table"""
    conn = sqlite3.connect(db_path)
    cursor = conn.cursor()
    try:
        cursor.execute(f"SELECT * FROM {table} LIMIT ?;", (int(limit),))
    except sqlite3.Error as e:
        print(f"Error reading {table}: {e}")
        conn.close()
        return
    records = cursor.fetchall()

    column_names = [description[0] for description in cursor.description]
    print(" | ".join(column_names))
    print("-" * 100)
    for record in records:
        print(" | ".join(str(value) for value in record))

    conn.close()


if __name__ == "__main__":
    path = sys.argv[1] if len(sys.argv) > 1 else "results.db"
    describe_database(path)
    view_records(path)
