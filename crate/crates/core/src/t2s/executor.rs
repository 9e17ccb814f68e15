//! Query executors. Only SELECT text reaches an executor; the SQLite
//! implementation additionally runs its connection with `query_only` set and
//! refuses any prepared statement that is not read-only.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Mutex;

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde_json::Value;

use super::{ColumnInfo, Dialect, ResultTable, SchemaContext, TableSchema};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    /// The statement does not compile: bad syntax, unknown table or column.
    #[error("{0}")]
    Compile(String),
    /// The statement compiled but failed while running.
    #[error("{0}")]
    Runtime(String),
    #[error("executor unavailable: {0}")]
    Connection(String),
}

pub trait Executor: Send + Sync {
    /// Runs a query and returns at most `row_limit` rows.
    fn execute(&self, sql: &str, row_limit: usize) -> Result<ResultTable, ExecError>;
    /// Compiles a query without reading rows.
    fn dry_run(&self, sql: &str) -> Result<(), ExecError>;
}

fn to_json(v: ValueRef<'_>) -> Value {
    match v {
        ValueRef::Null => Value::Null,
        ValueRef::Integer(i) => Value::from(i),
        ValueRef::Real(f) => serde_json::Number::from_f64(f).map_or(Value::Null, Value::Number),
        ValueRef::Text(t) => Value::String(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Value::String(format!("<{} bytes>", b.len())),
    }
}

/// SQLite-backed executor over one shared connection.
pub struct SqliteExecutor {
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for SqliteExecutor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SqliteExecutor").finish_non_exhaustive()
    }
}

impl SqliteExecutor {
    /// Wraps a seeded connection and switches it to read-only mode.
    pub fn from_connection(conn: Connection) -> Result<Self, ExecError> {
        conn.pragma_update(None, "query_only", true)
            .map_err(|e| ExecError::Connection(e.to_string()))?;
        Ok(Self {
            conn: Mutex::new(conn),
        })
    }

    pub fn open_read_only(path: &Path) -> Result<Self, ExecError> {
        let conn = Connection::open_with_flags(
            path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )
        .map_err(|e| ExecError::Connection(format!("{}: {e}", path.display())))?;
        Self::from_connection(conn)
    }

    fn lock(&self) -> Result<std::sync::MutexGuard<'_, Connection>, ExecError> {
        self.conn
            .lock()
            .map_err(|_| ExecError::Connection("connection mutex poisoned".into()))
    }

    /// Reads tables, column types and up to three sample rows per table.
    pub fn introspect(
        &self,
        dialect: Dialect,
        authorized: Option<&BTreeSet<String>>,
        units: &BTreeMap<String, String>,
    ) -> Result<SchemaContext, ExecError> {
        let conn = self.lock()?;
        let compile = |e: rusqlite::Error| ExecError::Compile(e.to_string());
        let mut names: Vec<String> = conn
            .prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name")
            .map_err(compile)?
            .query_map([], |r| r.get(0))
            .map_err(compile)?
            .collect::<Result<_, _>>()
            .map_err(compile)?;
        names.sort();
        let mut tables = Vec::new();
        for name in names {
            let columns: Vec<ColumnInfo> = conn
                .prepare("SELECT name, type FROM pragma_table_info(?1) ORDER BY cid")
                .map_err(compile)?
                .query_map([&name], |r| {
                    Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?))
                })
                .map_err(compile)?
                .collect::<Result<Vec<_>, _>>()
                .map_err(compile)?
                .into_iter()
                .map(|(col, ty)| {
                    let key = format!("{}.{}", name.to_lowercase(), col.to_lowercase());
                    ColumnInfo {
                        unit: units.get(&key).cloned(),
                        name: col,
                        sql_type: ty,
                    }
                })
                .collect();
            let mut stmt = conn
                .prepare(&format!("SELECT * FROM \"{}\" LIMIT 3", name.replace('"', "\"\"")))
                .map_err(compile)?;
            let width = stmt.column_count();
            let sample_rows = stmt
                .query_map([], |r| (0..width).map(|i| r.get_ref(i).map(to_json)).collect())
                .map_err(compile)?
                .collect::<Result<Vec<Vec<Value>>, _>>()
                .map_err(compile)?;
            tables.push(TableSchema {
                name,
                columns,
                sample_rows,
            });
        }
        let all: BTreeSet<String> = tables
            .iter()
            .flat_map(|t| {
                t.columns
                    .iter()
                    .map(move |c| format!("{}.{}", t.name.to_lowercase(), c.name.to_lowercase()))
            })
            .collect();
        let authorized_columns = match authorized {
            Some(a) => a.intersection(&all).cloned().collect(),
            None => all,
        };
        Ok(SchemaContext {
            dialect,
            tables,
            authorized_columns,
        })
    }
}

impl Executor for SqliteExecutor {
    fn execute(&self, sql: &str, row_limit: usize) -> Result<ResultTable, ExecError> {
        let conn = self.lock()?;
        let mut stmt = conn
            .prepare(sql)
            .map_err(|e| ExecError::Compile(e.to_string()))?;
        if !stmt.readonly() {
            return Err(ExecError::Compile("statement is not read-only".into()));
        }
        let columns: Vec<String> = stmt.column_names().iter().map(|s| s.to_string()).collect();
        let width = columns.len();
        let mut rows = Vec::new();
        let mut cursor = stmt
            .query([])
            .map_err(|e| ExecError::Runtime(e.to_string()))?;
        while rows.len() < row_limit {
            match cursor.next() {
                Ok(Some(r)) => {
                    let row = (0..width)
                        .map(|i| r.get_ref(i).map(to_json))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| ExecError::Runtime(e.to_string()))?;
                    rows.push(row);
                }
                Ok(None) => break,
                Err(e) => return Err(ExecError::Runtime(e.to_string())),
            }
        }
        Ok(ResultTable { columns, rows })
    }

    fn dry_run(&self, sql: &str) -> Result<(), ExecError> {
        let conn = self.lock()?;
        let stmt = conn
            .prepare(sql)
            .map_err(|e| ExecError::Compile(e.to_string()))?;
        if !stmt.readonly() {
            return Err(ExecError::Compile("statement is not read-only".into()));
        }
        Ok(())
    }
}

/// Executor wrapper that records every statement it receives.
pub struct RecordingExecutor<E> {
    inner: E,
    log: Mutex<Vec<String>>,
}

impl<E: Executor> RecordingExecutor<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            log: Mutex::default(),
        }
    }

    pub fn statements(&self) -> Vec<String> {
        self.log.lock().unwrap().clone()
    }

    pub fn calls(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: Executor> Executor for RecordingExecutor<E> {
    fn execute(&self, sql: &str, row_limit: usize) -> Result<ResultTable, ExecError> {
        self.log.lock().unwrap().push(sql.to_string());
        self.inner.execute(sql, row_limit)
    }

    fn dry_run(&self, sql: &str) -> Result<(), ExecError> {
        self.log.lock().unwrap().push(sql.to_string());
        self.inner.dry_run(sql)
    }
}

impl<E: Executor + ?Sized> Executor for std::sync::Arc<E> {
    fn execute(&self, sql: &str, row_limit: usize) -> Result<ResultTable, ExecError> {
        (**self).execute(sql, row_limit)
    }

    fn dry_run(&self, sql: &str) -> Result<(), ExecError> {
        (**self).dry_run(sql)
    }
}

/// Fails every call; stands in for an unreachable database.
#[derive(Debug, Default, Clone, Copy)]
pub struct OfflineExecutor;

impl Executor for OfflineExecutor {
    fn execute(&self, _: &str, _: usize) -> Result<ResultTable, ExecError> {
        Err(ExecError::Connection("connection refused".into()))
    }

    fn dry_run(&self, _: &str) -> Result<(), ExecError> {
        Err(ExecError::Connection("connection refused".into()))
    }
}
