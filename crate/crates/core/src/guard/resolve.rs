//! Scope-aware identifier resolution over the sqlparser AST.
//!
//! Resolution is deliberately conservative: anything the engine might not
//! resolve is reported. Derived tables and CTE bodies do not see the
//! enclosing query's columns, and select-list aliases are visible only in
//! `WHERE`, `GROUP BY`, `HAVING` and `ORDER BY` of their own select.

use std::collections::BTreeSet;
use std::ops::ControlFlow;

use sqlparser::ast::{
    Expr, GroupByExpr, Ident, JoinConstraint, JoinOperator, LimitClause, ObjectName, OrderBy,
    OrderByKind, Query, Select, SelectItem, SelectItemQualifiedWildcardKind, SetExpr, TableAlias,
    TableFactor, TableWithJoins, Visit, Visitor,
};

use super::{statement_kind, suggest_column, ColumnRef, GuardError};
use crate::eventlog::SchemaContext;

const ROWID_ALIASES: &[&str] = &["rowid", "oid", "_rowid_"];
const BARE_KEYWORDS: &[&str] = &["current_timestamp", "current_date", "current_time"];
const JSON_EACH_COLUMNS: &[&str] = &[
    "key", "value", "type", "atom", "id", "parent", "fullkey", "path", "json", "root",
];

#[derive(Debug, Clone)]
enum Cols {
    Known(Vec<String>),
    /// Columns the guard cannot enumerate; any name is accepted.
    Opaque,
}

impl Cols {
    fn has(&self, name: &str) -> bool {
        match self {
            Cols::Known(c) => c.iter().any(|c| c == name),
            Cols::Opaque => true,
        }
    }
}

#[derive(Debug)]
struct Source {
    name: String,
    cols: Cols,
    base: bool,
}

impl Source {
    fn has(&self, col: &str) -> bool {
        self.cols.has(col) || (self.base && ROWID_ALIASES.contains(&col))
    }
}

struct Scope<'a> {
    sources: Vec<Source>,
    aliases: Vec<String>,
    parent: Option<&'a Scope<'a>>,
}

impl<'a> Scope<'a> {
    fn new(parent: Option<&'a Scope<'a>>) -> Self {
        Self {
            sources: Vec::new(),
            aliases: Vec::new(),
            parent,
        }
    }
}

struct Ctes<'a> {
    defs: Vec<(String, Cols)>,
    parent: Option<&'a Ctes<'a>>,
}

impl Ctes<'_> {
    fn lookup(&self, name: &str) -> Option<&Cols> {
        self.defs
            .iter()
            .rev()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c)
            .or_else(|| self.parent.and_then(|p| p.lookup(name)))
    }
}

fn lc(id: &Ident) -> String {
    id.value.to_lowercase()
}

fn object_parts(name: &ObjectName) -> Vec<String> {
    name.0
        .iter()
        .map(|p| p.as_ident().map(lc).unwrap_or_else(|| p.to_string().to_lowercase()))
        .collect()
}

pub(super) struct Analyzer<'s> {
    schema: &'s SchemaContext,
    table: String,
    index: usize,
    refs: &'s mut BTreeSet<ColumnRef>,
}

impl<'s> Analyzer<'s> {
    pub(super) fn new(schema: &'s SchemaContext, index: usize, refs: &'s mut BTreeSet<ColumnRef>) -> Self {
        Self {
            table: schema.table_name.to_lowercase(),
            schema,
            index,
            refs,
        }
    }

    pub(super) fn check_query(&mut self, q: &Query) -> Result<(), GuardError> {
        let root = Ctes {
            defs: vec![],
            parent: None,
        };
        self.query(q, None, &root).map(|_| ())
    }

    fn unknown_column(&self, name: String) -> GuardError {
        GuardError::UnknownColumn {
            statement_index: self.index,
            did_you_mean: suggest_column(&name, self.schema),
            name,
        }
    }

    fn unknown_table(&self, name: String) -> GuardError {
        GuardError::UnknownTable {
            statement_index: self.index,
            name,
            expected: self.schema.table_name.clone(),
        }
    }

    fn unsupported(&self, what: impl Into<String>) -> GuardError {
        GuardError::Unsupported {
            statement_index: self.index,
            construct: what.into(),
        }
    }

    fn query(&mut self, q: &Query, outer: Option<&Scope<'_>>, ctes: &Ctes<'_>) -> Result<Cols, GuardError> {
        let mut env = Ctes {
            defs: vec![],
            parent: Some(ctes),
        };
        if let Some(with) = &q.with {
            for cte in &with.cte_tables {
                let name = lc(&cte.alias.name);
                let explicit: Vec<String> = cte.alias.columns.iter().map(|c| lc(&c.name)).collect();
                if with.recursive {
                    let pre = if explicit.is_empty() {
                        anchor_columns(&cte.query)
                    } else {
                        Cols::Known(explicit.clone())
                    };
                    env.defs.push((name.clone(), pre));
                    let body = self.query(&cte.query, None, &env);
                    env.defs.pop();
                    body?;
                } else {
                    self.query(&cte.query, None, &env)?;
                }
                let cols = if explicit.is_empty() {
                    self.output_of(&cte.query, &env)?
                } else {
                    Cols::Known(explicit)
                };
                env.defs.push((name, cols));
            }
        }

        let cols = match q.body.as_ref() {
            SetExpr::Select(s) => self.select(s, outer, &env, q.order_by.as_ref())?,
            other => {
                let cols = self.set_expr(other, outer, &env)?;
                if let Some(ob) = &q.order_by {
                    let mut scope = Scope::new(outer);
                    scope.sources.push(Source {
                        name: String::new(),
                        cols: cols.clone(),
                        base: false,
                    });
                    self.order_by(ob, &scope, &env, false)?;
                }
                cols
            }
        };

        if let Some(limit) = &q.limit_clause {
            let scope = Scope::new(outer);
            match limit {
                LimitClause::LimitOffset {
                    limit,
                    offset,
                    limit_by,
                } => {
                    if let Some(e) = limit {
                        self.expr(e, &scope, &env, false)?;
                    }
                    if let Some(o) = offset {
                        self.expr(&o.value, &scope, &env, false)?;
                    }
                    for e in limit_by {
                        self.expr(e, &scope, &env, false)?;
                    }
                }
                LimitClause::OffsetCommaLimit { offset, limit } => {
                    self.expr(offset, &scope, &env, false)?;
                    self.expr(limit, &scope, &env, false)?;
                }
            }
        }
        if q.fetch.is_some() || !q.locks.is_empty() || !q.pipe_operators.is_empty() {
            return Err(self.unsupported("FETCH / locking / pipe clauses"));
        }
        Ok(cols)
    }

    /// Output columns of a CTE body, computed a second time without
    /// recording references (they were recorded by the first pass).
    fn output_of(&mut self, q: &Query, env: &Ctes<'_>) -> Result<Cols, GuardError> {
        let mut scratch = BTreeSet::new();
        let mut a = Analyzer {
            schema: self.schema,
            table: self.table.clone(),
            index: self.index,
            refs: &mut scratch,
        };
        a.query(q, None, env)
    }

    fn set_expr(&mut self, e: &SetExpr, outer: Option<&Scope<'_>>, env: &Ctes<'_>) -> Result<Cols, GuardError> {
        match e {
            SetExpr::Select(s) => self.select(s, outer, env, None),
            SetExpr::Query(q) => self.query(q, outer, env),
            SetExpr::SetOperation { left, right, .. } => {
                let cols = self.set_expr(left, outer, env)?;
                self.set_expr(right, outer, env)?;
                Ok(cols)
            }
            SetExpr::Values(values) => {
                let scope = Scope::new(outer);
                let mut width = 0;
                for row in &values.rows {
                    width = width.max(row.content.len());
                    for e in &row.content {
                        self.expr(e, &scope, env, false)?;
                    }
                }
                Ok(Cols::Known((1..=width).map(|i| format!("column{i}")).collect()))
            }
            SetExpr::Insert(s) | SetExpr::Update(s) | SetExpr::Delete(s) | SetExpr::Merge(s) => {
                Err(GuardError::WriteStatement {
                    statement_index: self.index,
                    kind: statement_kind(s),
                })
            }
            SetExpr::Table(_) => Err(self.unsupported("TABLE")),
        }
    }

    fn select(
        &mut self,
        s: &Select,
        outer: Option<&Scope<'_>>,
        env: &Ctes<'_>,
        order_by: Option<&OrderBy>,
    ) -> Result<Cols, GuardError> {
        if s.into.is_some() {
            return Err(GuardError::WriteStatement {
                statement_index: self.index,
                kind: "SELECT INTO".into(),
            });
        }
        if !s.lateral_views.is_empty() || !s.connect_by.is_empty() {
            return Err(self.unsupported("LATERAL VIEW / CONNECT BY"));
        }

        let mut scope = Scope::new(outer);
        for twj in &s.from {
            self.table_with_joins(twj, &mut scope, env)?;
        }

        let mut out: Vec<String> = Vec::new();
        let mut opaque = false;
        let mut aliases = Vec::new();
        for item in &s.projection {
            match item {
                SelectItem::UnnamedExpr(e) => {
                    self.expr(e, &scope, env, false)?;
                    out.push(output_name(e));
                }
                SelectItem::ExprWithAlias { expr, alias } => {
                    self.expr(expr, &scope, env, false)?;
                    out.push(lc(alias));
                    aliases.push(lc(alias));
                }
                SelectItem::ExprWithAliases { .. } => {
                    return Err(self.unsupported("multiple aliases for one expression"))
                }
                SelectItem::Wildcard(_) => {
                    for src in &scope.sources {
                        opaque |= self.expand(src, &mut out);
                    }
                }
                SelectItem::QualifiedWildcard(kind, _) => {
                    let SelectItemQualifiedWildcardKind::ObjectName(name) = kind else {
                        return Err(self.unsupported("wildcard on an expression"));
                    };
                    let qual = object_parts(name).pop().unwrap_or_default();
                    let Some(src) = scope.sources.iter().find(|s| s.name == qual) else {
                        return Err(self.unknown_table(qual));
                    };
                    opaque |= self.expand(src, &mut out);
                }
            }
        }
        scope.aliases = aliases;

        if let Some(e) = &s.prewhere {
            self.expr(e, &scope, env, false)?;
        }
        if let Some(e) = &s.selection {
            self.expr(e, &scope, env, true)?;
        }
        match &s.group_by {
            GroupByExpr::Expressions(exprs, _) => {
                for e in exprs {
                    self.expr(e, &scope, env, true)?;
                }
            }
            GroupByExpr::All(_) => return Err(self.unsupported("GROUP BY ALL")),
        }
        if let Some(e) = &s.having {
            self.expr(e, &scope, env, true)?;
        }
        for w in &s.named_window {
            self.visit(w, &scope, env, false)?;
        }
        if let Some(e) = &s.qualify {
            self.expr(e, &scope, env, true)?;
        }
        for e in s.cluster_by.iter().chain(&s.distribute_by) {
            self.expr(e, &scope, env, false)?;
        }
        for ob in &s.sort_by {
            self.visit(ob, &scope, env, true)?;
        }
        if let Some(ob) = order_by {
            self.order_by(ob, &scope, env, true)?;
        }

        Ok(if opaque { Cols::Opaque } else { Cols::Known(out) })
    }

    fn expand(&mut self, src: &Source, out: &mut Vec<String>) -> bool {
        match &src.cols {
            Cols::Known(cols) => {
                if src.base {
                    for c in cols {
                        self.refs.insert(ColumnRef::new(self.table.clone(), c.clone()));
                    }
                }
                out.extend(cols.iter().cloned());
                false
            }
            Cols::Opaque => true,
        }
    }

    fn order_by(&mut self, ob: &OrderBy, scope: &Scope<'_>, env: &Ctes<'_>, aliases: bool) -> Result<(), GuardError> {
        match &ob.kind {
            OrderByKind::Expressions(items) => {
                for item in items {
                    self.expr(&item.expr, scope, env, aliases)?;
                }
                Ok(())
            }
            OrderByKind::All(_) => Err(self.unsupported("ORDER BY ALL")),
        }
    }

    fn table_with_joins(&mut self, twj: &TableWithJoins, scope: &mut Scope<'_>, env: &Ctes<'_>) -> Result<(), GuardError> {
        self.factor(&twj.relation, scope, env)?;
        for join in &twj.joins {
            self.factor(&join.relation, scope, env)?;
            match join_constraint(&join.join_operator) {
                Some(JoinConstraint::On(e)) => self.expr(e, scope, env, false)?,
                Some(JoinConstraint::Using(names)) => {
                    let (right, left) = scope.sources.split_last().expect("just pushed");
                    for n in names {
                        let col = object_parts(n).pop().unwrap_or_default();
                        if !right.has(&col) || !left.iter().any(|s| s.has(&col)) {
                            return Err(self.unknown_column(col));
                        }
                        for s in left.iter().chain(std::iter::once(right)) {
                            if s.base && s.has(&col) {
                                self.refs.insert(ColumnRef::new(self.table.clone(), col.clone()));
                            }
                        }
                    }
                }
                Some(JoinConstraint::Natural) | Some(JoinConstraint::None) => {}
                None => return Err(self.unsupported("join operator")),
            }
        }
        Ok(())
    }

    fn factor(&mut self, tf: &TableFactor, scope: &mut Scope<'_>, env: &Ctes<'_>) -> Result<(), GuardError> {
        match tf {
            TableFactor::Table { name, alias, args, .. } => {
                let mut parts = object_parts(name);
                let table = parts.pop().unwrap_or_default();
                if let Some(args) = args {
                    if !parts.is_empty() || !matches!(table.as_str(), "json_each" | "json_tree") {
                        return Err(self.unknown_table(name.to_string()));
                    }
                    for a in &args.args {
                        self.visit(a, scope, env, false)?;
                    }
                    scope.sources.push(Source {
                        name: alias_name(alias).unwrap_or(table),
                        cols: Cols::Known(JSON_EACH_COLUMNS.iter().map(|s| s.to_string()).collect()),
                        base: false,
                    });
                    return Ok(());
                }
                let qualified_ok = match parts.as_slice() {
                    [] => true,
                    [schema] => schema == "main",
                    _ => false,
                };
                if !qualified_ok {
                    return Err(self.unknown_table(name.to_string()));
                }
                let cte = if parts.is_empty() { env.lookup(&table).cloned() } else { None };
                let (cols, base) = match cte {
                    Some(cols) => (cols, false),
                    None if table == self.table => (
                        Cols::Known(self.schema.columns.iter().map(|c| c.name.to_lowercase()).collect()),
                        true,
                    ),
                    None => return Err(self.unknown_table(name.to_string())),
                };
                scope.sources.push(Source {
                    name: alias_name(alias).unwrap_or(table),
                    cols: renamed(cols, alias),
                    base,
                });
                Ok(())
            }
            TableFactor::Derived { subquery, alias, .. } => {
                let cols = self.query(subquery, None, env)?;
                scope.sources.push(Source {
                    name: alias_name(alias).unwrap_or_default(),
                    cols: renamed(cols, alias),
                    base: false,
                });
                Ok(())
            }
            TableFactor::NestedJoin { table_with_joins, alias } => {
                if alias.is_some() {
                    return Err(self.unsupported("alias on a parenthesized join"));
                }
                self.table_with_joins(table_with_joins, scope, env)
            }
            other => Err(self.unsupported(format!("table source `{other}`"))),
        }
    }

    fn expr(&mut self, e: &Expr, scope: &Scope<'_>, env: &Ctes<'_>, aliases: bool) -> Result<(), GuardError> {
        self.visit(e, scope, env, aliases)
    }

    fn visit<V: Visit>(&mut self, node: &V, scope: &Scope<'_>, env: &Ctes<'_>, aliases: bool) -> Result<(), GuardError> {
        let mut walker = Walker {
            an: self,
            scope,
            env,
            aliases,
            depth: 0,
        };
        match node.visit(&mut walker) {
            ControlFlow::Continue(()) => Ok(()),
            ControlFlow::Break(e) => Err(e),
        }
    }

    fn resolve(&mut self, idents: &[Ident], scope: &Scope<'_>, aliases: bool) -> Result<(), GuardError> {
        let parts: Vec<String> = idents.iter().map(lc).collect();
        match parts.as_slice() {
            [col] => {
                let mut level = Some(scope);
                let mut innermost = true;
                while let Some(sc) = level {
                    let mut hit = false;
                    for src in sc.sources.iter().filter(|s| s.has(col)) {
                        hit = true;
                        if src.base && !ROWID_ALIASES.contains(&col.as_str()) {
                            self.refs.insert(ColumnRef::new(self.table.clone(), col.clone()));
                        }
                    }
                    if hit || (innermost && aliases && sc.aliases.contains(col)) {
                        return Ok(());
                    }
                    innermost = false;
                    level = sc.parent;
                }
                if idents[0].quote_style.is_none() && BARE_KEYWORDS.contains(&col.as_str()) {
                    return Ok(());
                }
                Err(self.unknown_column(col.clone()))
            }
            [.., qual, col] if parts.len() <= 3 => {
                let full = parts.join(".");
                if parts.len() == 3 && parts[0] != "main" {
                    return Err(self.unknown_column(full));
                }
                let mut level = Some(scope);
                while let Some(sc) = level {
                    if let Some(src) = sc.sources.iter().find(|s| &s.name == qual) {
                        if !src.has(col) {
                            return Err(self.unknown_column(full));
                        }
                        if src.base && !ROWID_ALIASES.contains(&col.as_str()) {
                            self.refs.insert(ColumnRef::new(self.table.clone(), col.clone()));
                        }
                        return Ok(());
                    }
                    level = sc.parent;
                }
                Err(self.unknown_column(full))
            }
            _ => Err(self.unknown_column(parts.join("."))),
        }
    }
}

struct Walker<'w, 's, 'a> {
    an: &'w mut Analyzer<'s>,
    scope: &'w Scope<'a>,
    env: &'w Ctes<'w>,
    aliases: bool,
    depth: usize,
}

impl Visitor for Walker<'_, '_, '_> {
    type Break = GuardError;

    fn pre_visit_query(&mut self, q: &Query) -> ControlFlow<GuardError> {
        if self.depth == 0 {
            if let Err(e) = self.an.query(q, Some(self.scope), self.env) {
                return ControlFlow::Break(e);
            }
        }
        self.depth += 1;
        ControlFlow::Continue(())
    }

    fn post_visit_query(&mut self, _q: &Query) -> ControlFlow<GuardError> {
        self.depth -= 1;
        ControlFlow::Continue(())
    }

    fn pre_visit_expr(&mut self, e: &Expr) -> ControlFlow<GuardError> {
        if self.depth > 0 {
            return ControlFlow::Continue(());
        }
        let res = match e {
            Expr::Identifier(id) => self.an.resolve(std::slice::from_ref(id), self.scope, self.aliases),
            Expr::CompoundIdentifier(ids) => self.an.resolve(ids, self.scope, self.aliases),
            _ => Ok(()),
        };
        match res {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => ControlFlow::Break(e),
        }
    }
}

fn join_constraint(op: &JoinOperator) -> Option<&JoinConstraint> {
    match op {
        JoinOperator::Join(c)
        | JoinOperator::Inner(c)
        | JoinOperator::Left(c)
        | JoinOperator::LeftOuter(c)
        | JoinOperator::Right(c)
        | JoinOperator::RightOuter(c)
        | JoinOperator::FullOuter(c)
        | JoinOperator::CrossJoin(c) => Some(c),
        _ => None,
    }
}

fn alias_name(alias: &Option<TableAlias>) -> Option<String> {
    alias.as_ref().map(|a| lc(&a.name))
}

fn renamed(cols: Cols, alias: &Option<TableAlias>) -> Cols {
    match alias {
        Some(a) if !a.columns.is_empty() => Cols::Known(a.columns.iter().map(|c| lc(&c.name)).collect()),
        _ => cols,
    }
}

/// Name the engine gives an unaliased result column.
fn output_name(e: &Expr) -> String {
    match e {
        Expr::Identifier(id) => lc(id),
        Expr::CompoundIdentifier(ids) => ids.last().map(lc).unwrap_or_default(),
        other => other.to_string().to_lowercase(),
    }
}

/// Syntactic output names of the anchor (leftmost) select of a recursive
/// CTE, used to pre-register the CTE before its body is analyzed.
fn anchor_columns(q: &Query) -> Cols {
    let mut body = q.body.as_ref();
    loop {
        match body {
            SetExpr::SetOperation { left, .. } => body = left,
            SetExpr::Query(inner) => body = inner.body.as_ref(),
            SetExpr::Select(s) => {
                let mut out = Vec::new();
                for item in &s.projection {
                    match item {
                        SelectItem::UnnamedExpr(e) => out.push(output_name(e)),
                        SelectItem::ExprWithAlias { alias, .. } => out.push(lc(alias)),
                        _ => return Cols::Opaque,
                    }
                }
                return Cols::Known(out);
            }
            _ => return Cols::Opaque,
        }
    }
}
