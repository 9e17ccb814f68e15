//! Embedded scenario database with a logistics schema and a retail/music
//! schema. Distances are stored in metres, a few orders are dated after the
//! fixture clock, and `customers.email` is withheld from authorization.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{NaiveDate, NaiveDateTime};
use rusqlite::Connection;

use super::executor::{ExecError, SqliteExecutor};
use super::{Dialect, SchemaContext};

/// Logical "now" for scenarios that depend on the date.
pub fn fixture_now() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2025, 6, 15)
        .unwrap()
        .and_hms_opt(12, 0, 0)
        .unwrap()
}

pub const FIXTURE_SQL: &str = r#"
CREATE TABLE shipments (
    shipment_id INTEGER PRIMARY KEY,
    origin TEXT NOT NULL,
    destination TEXT NOT NULL,
    distance REAL NOT NULL,
    shipped_at DATE NOT NULL
);
INSERT INTO shipments VALUES
    (1, 'Oslo', 'Bergen', 463000.0, '2025-05-02'),
    (2, 'Oslo', 'Trondheim', 494000.0, '2025-05-10'),
    (3, 'Bergen', 'Stavanger', 209000.0, '2025-05-21'),
    (4, 'Trondheim', 'Bodo', 709000.0, '2025-06-01'),
    (5, 'Oslo', 'Drammen', 40233.5, '2025-06-03'),
    (6, 'Stavanger', 'Oslo', 542000.0, '2025-06-09');

CREATE TABLE orders (
    order_id INTEGER PRIMARY KEY,
    customer_id INTEGER NOT NULL,
    status TEXT NOT NULL,
    total REAL NOT NULL,
    order_date DATE NOT NULL
);
INSERT INTO orders VALUES
    (101, 1, 'closed', 120.0, '2024-11-20'),
    (102, 2, 'closed', 80.5, '2025-01-14'),
    (103, 3, 'shipped', 42.0, '2025-02-03'),
    (104, 1, 'open', 310.0, '2025-03-28'),
    (105, 4, 'shipped', 95.0, '2025-04-11'),
    (106, 2, 'open', 18.0, '2025-05-05'),
    (107, 5, 'open', 230.0, '2025-05-30'),
    (108, 3, 'shipped', 64.0, '2025-06-10'),
    (109, 4, 'open', 500.0, '2026-01-15'),
    (110, 5, 'open', 75.0, '2026-02-20'),
    (111, 1, 'shipped', 12.0, '2026-03-03');

CREATE TABLE artists (
    artist_id INTEGER PRIMARY KEY,
    name TEXT NOT NULL
);
INSERT INTO artists VALUES
    (1, 'Northbound Crew'),
    (2, 'Velvet Static'),
    (3, 'Blue Meridian');

CREATE TABLE albums (
    album_id INTEGER PRIMARY KEY,
    title TEXT NOT NULL,
    artist_id INTEGER NOT NULL
);
INSERT INTO albums VALUES
    (1, 'City Lights', 1),
    (2, 'Paper Crowns', 1),
    (3, 'Static Bloom', 2),
    (4, 'Low Tide', 3);

CREATE TABLE tracks (
    track_id INTEGER PRIMARY KEY,
    name TEXT NOT NULL,
    album_id INTEGER NOT NULL,
    genre TEXT NOT NULL,
    unit_price REAL NOT NULL
);
INSERT INTO tracks VALUES
    (1, 'Corner Store', 1, 'Hip Hop', 0.99),
    (2, 'Night Bus', 1, 'Hip Hop', 0.99),
    (3, 'Crown Me', 2, 'Hip Hop', 1.29),
    (4, 'Fold', 2, 'Hip Hop', 0.99),
    (5, 'Bloom', 3, 'Rock', 0.99),
    (6, 'Feedback Garden', 3, 'Rock', 1.29),
    (7, 'Low Tide', 4, 'Jazz', 0.99),
    (8, 'Undertow', 4, 'Jazz', 0.99);

CREATE TABLE customers (
    customer_id INTEGER PRIMARY KEY,
    first_name TEXT NOT NULL,
    last_name TEXT NOT NULL,
    country TEXT NOT NULL,
    email TEXT NOT NULL
);
INSERT INTO customers VALUES
    (1, 'Ana', 'Silva', 'Brazil', 'ana@example.com'),
    (2, 'Ben', 'Okafor', 'Canada', 'ben@example.com'),
    (3, 'Chloe', 'Martin', 'France', 'chloe@example.com'),
    (4, 'Dev', 'Patel', 'Canada', 'dev@example.com'),
    (5, 'Eva', 'Novak', 'Brazil', 'eva@example.com');

CREATE TABLE invoices (
    invoice_id INTEGER PRIMARY KEY,
    customer_id INTEGER NOT NULL,
    invoice_date DATE NOT NULL,
    total REAL NOT NULL
);
INSERT INTO invoices VALUES
    (1, 1, '2025-01-05', 4.95),
    (2, 2, '2025-01-19', 3.27),
    (3, 3, '2025-02-11', 2.58),
    (4, 4, '2025-03-02', 5.16),
    (5, 5, '2025-03-30', 2.97),
    (6, 2, '2025-04-22', 1.98);

CREATE TABLE invoice_lines (
    invoice_line_id INTEGER PRIMARY KEY,
    invoice_id INTEGER NOT NULL,
    track_id INTEGER NOT NULL,
    unit_price REAL NOT NULL,
    quantity INTEGER NOT NULL
);
INSERT INTO invoice_lines VALUES
    (1, 1, 1, 0.99, 3),
    (2, 1, 2, 0.99, 2),
    (3, 2, 3, 1.29, 1),
    (4, 2, 4, 0.99, 2),
    (5, 3, 6, 1.29, 2),
    (6, 4, 1, 0.99, 4),
    (7, 4, 5, 0.99, 1),
    (8, 4, 7, 0.99, 1),
    (9, 5, 2, 0.99, 3),
    (10, 6, 8, 0.99, 2);
"#;

/// Unit annotations of the fixture (`table.column` → unit).
pub fn fixture_units() -> BTreeMap<String, String> {
    BTreeMap::from([("shipments.distance".to_string(), "metres".to_string())])
}

/// Columns withheld from queries.
pub const WITHHELD: &[&str] = &["customers.email"];

/// Words that route a question to the fixture besides its table names.
pub const FIXTURE_METRICS: &[&str] = &[
    "revenue", "sales", "distance", "genre", "status", "country", "invoice", "track", "album",
];

pub fn fixture_executor() -> Result<SqliteExecutor, ExecError> {
    let conn = Connection::open_in_memory().map_err(|e| ExecError::Connection(e.to_string()))?;
    conn.execute_batch(FIXTURE_SQL)
        .map_err(|e| ExecError::Connection(format!("seeding fixture: {e}")))?;
    SqliteExecutor::from_connection(conn)
}

/// Schema of the fixture with every column authorized except [`WITHHELD`].
pub fn fixture_schema(exec: &SqliteExecutor, dialect: Dialect) -> Result<SchemaContext, ExecError> {
    let mut schema = exec.introspect(dialect, None, &fixture_units())?;
    let withheld: BTreeSet<String> = WITHHELD.iter().map(|s| s.to_string()).collect();
    schema.authorized_columns.retain(|c| !withheld.contains(c));
    Ok(schema)
}
