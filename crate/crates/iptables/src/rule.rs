// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Parser for the supported iptables rule subset.

use std::fmt;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Table {
    Filter,
    Nat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Chain {
    Forward,
    Prerouting,
    Postrouting,
}

impl fmt::Display for Chain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Chain::Forward => "FORWARD",
            Chain::Prerouting => "PREROUTING",
            Chain::Postrouting => "POSTROUTING",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Append,
    /// 1-based position, as on the iptables command line.
    Insert(usize),
    Delete,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConnStates {
    pub new: bool,
    pub established: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Nth {
    pub every: u32,
    pub packet: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Accept,
    Drop,
    Dnat { addr: Ipv4Addr, port: Option<u16> },
    Masquerade { ports: Option<(u16, u16)> },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IptablesRule {
    pub command: Command,
    pub table: Table,
    pub chain: Chain,
    pub in_iface: Option<String>,
    pub out_iface: Option<String>,
    pub src: Option<Ipv4Net>,
    pub dst: Option<Ipv4Net>,
    pub protocol: Option<u8>,
    pub sport: Option<u16>,
    pub dport: Option<u16>,
    pub state: Option<ConnStates>,
    pub nth: Option<Nth>,
    pub target: Target,
}

impl IptablesRule {
    /// Equality on everything but the command, used to resolve `-D`.
    pub fn same_rule(&self, other: &IptablesRule) -> bool {
        IptablesRule {
            command: other.command,
            ..self.clone()
        } == *other
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("unsupported atom `{0}`")]
    Unsupported(String),
    #[error("`{0}` needs a value")]
    MissingValue(String),
    #[error("bad value `{value}` for `{atom}`")]
    BadValue { atom: String, value: String },
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown chain `{0}`")]
    UnknownChain(String),
    #[error("chain {chain} is not in the {table} table")]
    WrongTable { chain: Chain, table: &'static str },
    #[error("no command (-A, -I or -D)")]
    NoCommand,
    #[error("no target (-j)")]
    NoTarget,
    #[error("`{0}` given twice")]
    Repeated(String),
    #[error("`{atom}` needs `-m {module}`")]
    NeedsModule { atom: String, module: &'static str },
    #[error("target {0} is not valid in this table or chain")]
    TargetPlacement(String),
    #[error("port match `{0}` needs `-p tcp` or `-p udp`")]
    PortWithoutProtocol(String),
}

/// Parse failure with the 1-based character column of the offending token.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("column {column}: {kind}")]
pub struct ParseError {
    pub column: usize,
    pub kind: ParseErrorKind,
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    let mut col = 0;
    for (i, ch) in text.char_indices() {
        col += 1;
        if ch.is_whitespace() || ch == '\\' {
            if let Some((s, c)) = start.take() {
                out.push(Token {
                    text: &text[s..i],
                    column: c,
                });
            }
        } else if start.is_none() {
            start = Some((i, col));
        }
    }
    if let Some((s, c)) = start {
        out.push(Token {
            text: &text[s..],
            column: c,
        });
    }
    out
}

struct Cursor<'a> {
    tokens: Vec<Token<'a>>,
    pos: usize,
    end_column: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> Option<&Token<'a>> {
        let t = self.tokens.get(self.pos);
        self.pos += 1;
        t
    }

    fn peek(&self) -> Option<&Token<'a>> {
        self.tokens.get(self.pos)
    }

    fn value(&mut self, atom: &Token<'a>) -> Result<(&'a str, usize), ParseError> {
        match self.tokens.get(self.pos) {
            Some(t) if !t.text.starts_with('-') || t.text.parse::<i64>().is_ok() => {
                self.pos += 1;
                Ok((t.text, t.column))
            }
            _ => Err(ParseError {
                column: atom.column,
                kind: ParseErrorKind::MissingValue(atom.text.to_string()),
            }),
        }
    }
}

fn bad(atom: &str, value: &str, column: usize) -> ParseError {
    ParseError {
        column,
        kind: ParseErrorKind::BadValue {
            atom: atom.to_string(),
            value: value.to_string(),
        },
    }
}

fn parse_net(atom: &str, v: &str, column: usize) -> Result<Ipv4Net, ParseError> {
    if let Ok(n) = v.parse::<Ipv4Net>() {
        return Ok(n.trunc());
    }
    v.parse::<Ipv4Addr>()
        .map(|a| Ipv4Net::new(a, 32).expect("/32 is valid"))
        .map_err(|_| bad(atom, v, column))
}

fn parse_proto(v: &str, column: usize) -> Result<u8, ParseError> {
    match v.to_ascii_lowercase().as_str() {
        "tcp" => Ok(6),
        "udp" => Ok(17),
        "icmp" => Ok(1),
        n => n.parse().map_err(|_| bad("-p", v, column)),
    }
}

fn parse_port(atom: &str, v: &str, column: usize) -> Result<u16, ParseError> {
    v.parse().map_err(|_| bad(atom, v, column))
}

fn parse_dnat(v: &str, column: usize) -> Result<Target, ParseError> {
    let (a, p) = match v.split_once(':') {
        Some((a, p)) => (a, Some(parse_port("--to-destination", p, column)?)),
        None => (v, None),
    };
    let addr = a.parse().map_err(|_| bad("--to-destination", v, column))?;
    Ok(Target::Dnat { addr, port: p })
}

fn parse_port_range(v: &str, column: usize) -> Result<(u16, u16), ParseError> {
    let (lo, hi) = v.split_once('-').unwrap_or((v, v));
    let lo = parse_port("--to-ports", lo, column)?;
    let hi = parse_port("--to-ports", hi, column)?;
    if lo > hi || lo == 0 {
        return Err(bad("--to-ports", v, column));
    }
    Ok((lo, hi))
}

fn parse_states(v: &str, column: usize) -> Result<ConnStates, ParseError> {
    let mut s = ConnStates::default();
    for part in v.split(',') {
        match part {
            "NEW" => s.new = true,
            "ESTABLISHED" => s.established = true,
            _ => return Err(bad("--state", part, column)),
        }
    }
    Ok(s)
}

fn set_once<T>(slot: &mut Option<T>, v: T, atom: &Token<'_>) -> Result<(), ParseError> {
    if slot.is_some() {
        return Err(ParseError {
            column: atom.column,
            kind: ParseErrorKind::Repeated(atom.text.to_string()),
        });
    }
    *slot = Some(v);
    Ok(())
}

/// Parses one rule line. A leading `iptables` word is optional.
pub fn parse_rule(text: &str) -> Result<IptablesRule, ParseError> {
    let tokens = tokenize(text);
    let end_column = text.chars().count() + 1;
    let mut c = Cursor {
        tokens,
        pos: 0,
        end_column,
    };
    if c.peek().is_some_and(|t| t.text == "iptables") {
        c.pos += 1;
    }

    let mut table: Option<(Table, usize)> = None;
    let mut command: Option<(Command, Chain, usize)> = None;
    let mut in_iface = None;
    let mut out_iface = None;
    let mut src = None;
    let mut dst = None;
    let mut protocol: Option<u8> = None;
    let mut sport = None;
    let mut dport = None;
    let mut state = None;
    let mut nth_every: Option<u32> = None;
    let mut nth_packet: Option<u32> = None;
    let mut nth_mode = false;
    let mut modules: Vec<&str> = Vec::new();
    let mut target: Option<(String, usize)> = None;
    let mut dnat_to: Option<(&str, usize)> = None;
    let mut masq_ports: Option<(&str, usize)> = None;

    while let Some(tok) = c.next() {
        let tok = Token {
            text: tok.text,
            column: tok.column,
        };
        let needs = |module: &'static str, modules: &[&str]| {
            if modules.contains(&module) {
                Ok(())
            } else {
                Err(ParseError {
                    column: tok.column,
                    kind: ParseErrorKind::NeedsModule {
                        atom: tok.text.to_string(),
                        module,
                    },
                })
            }
        };
        match tok.text {
            "-t" | "--table" => {
                let (v, col) = c.value(&tok)?;
                let t = match v {
                    "filter" => Table::Filter,
                    "nat" => Table::Nat,
                    _ => {
                        return Err(ParseError {
                            column: col,
                            kind: ParseErrorKind::UnknownTable(v.to_string()),
                        })
                    }
                };
                set_once(&mut table, (t, col), &tok)?;
            }
            "-A" | "--append" | "-I" | "--insert" | "-D" | "--delete" => {
                let (v, col) = c.value(&tok)?;
                let chain = match v {
                    "FORWARD" => Chain::Forward,
                    "PREROUTING" => Chain::Prerouting,
                    "POSTROUTING" => Chain::Postrouting,
                    _ => {
                        return Err(ParseError {
                            column: col,
                            kind: ParseErrorKind::UnknownChain(v.to_string()),
                        })
                    }
                };
                let cmd = match tok.text {
                    "-A" | "--append" => Command::Append,
                    "-D" | "--delete" => Command::Delete,
                    _ => {
                        let pos = match c.peek().map(|t| t.text.parse::<usize>()) {
                            Some(Ok(n)) if n > 0 => {
                                c.pos += 1;
                                n
                            }
                            _ => 1,
                        };
                        Command::Insert(pos)
                    }
                };
                set_once(&mut command, (cmd, chain, tok.column), &tok)?;
            }
            "-i" | "--in-interface" => {
                let (v, _) = c.value(&tok)?;
                set_once(&mut in_iface, v.to_string(), &tok)?;
            }
            "-o" | "--out-interface" => {
                let (v, _) = c.value(&tok)?;
                set_once(&mut out_iface, v.to_string(), &tok)?;
            }
            "-s" | "--source" => {
                let (v, col) = c.value(&tok)?;
                set_once(&mut src, parse_net(tok.text, v, col)?, &tok)?;
            }
            "-d" | "--destination" => {
                let (v, col) = c.value(&tok)?;
                set_once(&mut dst, parse_net(tok.text, v, col)?, &tok)?;
            }
            "-p" | "--protocol" => {
                let (v, col) = c.value(&tok)?;
                set_once(&mut protocol, parse_proto(v, col)?, &tok)?;
            }
            "--sport" | "--source-port" | "--dport" | "--destination-port" => {
                if !matches!(protocol, Some(6) | Some(17)) {
                    return Err(ParseError {
                        column: tok.column,
                        kind: ParseErrorKind::PortWithoutProtocol(tok.text.to_string()),
                    });
                }
                let (v, col) = c.value(&tok)?;
                let p = parse_port(tok.text, v, col)?;
                if tok.text.starts_with("--s") {
                    set_once(&mut sport, p, &tok)?;
                } else {
                    set_once(&mut dport, p, &tok)?;
                }
            }
            "-m" | "--match" => {
                let (v, col) = c.value(&tok)?;
                match v {
                    "state" | "conntrack" | "statistic" | "tcp" | "udp" => modules.push(v),
                    _ => {
                        return Err(ParseError {
                            column: col,
                            kind: ParseErrorKind::Unsupported(format!("-m {v}")),
                        })
                    }
                }
            }
            "--state" | "--ctstate" => {
                needs(
                    if tok.text == "--state" {
                        "state"
                    } else {
                        "conntrack"
                    },
                    &modules,
                )?;
                let (v, col) = c.value(&tok)?;
                set_once(&mut state, parse_states(v, col)?, &tok)?;
            }
            "--mode" => {
                needs("statistic", &modules)?;
                let (v, col) = c.value(&tok)?;
                if v != "nth" {
                    return Err(ParseError {
                        column: col,
                        kind: ParseErrorKind::Unsupported(format!("--mode {v}")),
                    });
                }
                nth_mode = true;
            }
            "--every" | "--packet" => {
                needs("statistic", &modules)?;
                let (v, col) = c.value(&tok)?;
                let n: u32 = v.parse().map_err(|_| bad(tok.text, v, col))?;
                if tok.text == "--every" {
                    if n == 0 {
                        return Err(bad(tok.text, v, col));
                    }
                    set_once(&mut nth_every, n, &tok)?;
                } else {
                    set_once(&mut nth_packet, n, &tok)?;
                }
            }
            "-j" | "--jump" => {
                let (v, col) = c.value(&tok)?;
                match v {
                    "ACCEPT" | "DROP" | "DNAT" | "MASQUERADE" => {
                        set_once(&mut target, (v.to_string(), col), &tok)?
                    }
                    _ => {
                        return Err(ParseError {
                            column: col,
                            kind: ParseErrorKind::Unsupported(format!("-j {v}")),
                        })
                    }
                }
            }
            "--to-destination" => {
                let v = c.value(&tok)?;
                set_once(&mut dnat_to, v, &tok)?;
            }
            "--to-ports" => {
                let v = c.value(&tok)?;
                set_once(&mut masq_ports, v, &tok)?;
            }
            other => {
                return Err(ParseError {
                    column: tok.column,
                    kind: ParseErrorKind::Unsupported(other.to_string()),
                })
            }
        }
    }

    let (command, chain, cmd_col) = command.ok_or(ParseError {
        column: 1,
        kind: ParseErrorKind::NoCommand,
    })?;
    let table = table.map_or(Table::Filter, |t| t.0);
    let chain_ok = match table {
        Table::Filter => chain == Chain::Forward,
        Table::Nat => chain != Chain::Forward,
    };
    if !chain_ok {
        return Err(ParseError {
            column: cmd_col,
            kind: ParseErrorKind::WrongTable {
                chain,
                table: if table == Table::Filter {
                    "filter"
                } else {
                    "nat"
                },
            },
        });
    }

    let (tname, tcol) = target.ok_or(ParseError {
        column: c.end_column,
        kind: ParseErrorKind::NoTarget,
    })?;
    let placement = |ok: bool| {
        if ok {
            Ok(())
        } else {
            Err(ParseError {
                column: tcol,
                kind: ParseErrorKind::TargetPlacement(tname.clone()),
            })
        }
    };
    let target = match tname.as_str() {
        "ACCEPT" => Target::Accept,
        "DROP" => {
            placement(table == Table::Filter)?;
            Target::Drop
        }
        "DNAT" => {
            placement(chain == Chain::Prerouting)?;
            let (v, col) = dnat_to.ok_or(ParseError {
                column: tcol,
                kind: ParseErrorKind::MissingValue("--to-destination".into()),
            })?;
            parse_dnat(v, col)?
        }
        _ => {
            placement(chain == Chain::Postrouting)?;
            Target::Masquerade {
                ports: masq_ports
                    .map(|(v, col)| parse_port_range(v, col))
                    .transpose()?,
            }
        }
    };
    if let (Some((_, col)), false) = (dnat_to, matches!(target, Target::Dnat { .. })) {
        return Err(ParseError {
            column: col,
            kind: ParseErrorKind::Unsupported("--to-destination".into()),
        });
    }

    let nth = match (nth_mode, nth_every) {
        (true, Some(every)) => {
            let packet = nth_packet.unwrap_or(0);
            if packet >= every {
                return Err(bad("--packet", &packet.to_string(), tcol));
            }
            Some(Nth { every, packet })
        }
        (true, None) => {
            return Err(ParseError {
                column: tcol,
                kind: ParseErrorKind::MissingValue("--every".into()),
            })
        }
        (false, _) if nth_every.is_some() => {
            return Err(ParseError {
                column: tcol,
                kind: ParseErrorKind::MissingValue("--mode".into()),
            })
        }
        _ => None,
    };

    Ok(IptablesRule {
        command,
        table,
        chain,
        in_iface,
        out_iface,
        src,
        dst,
        protocol,
        sport,
        dport,
        state,
        nth,
        target,
    })
}

/// Parses a rule file: one rule per logical line, `\` continuations and
/// `#` comments allowed. Errors carry the 1-based line of the rule start.
pub fn parse_rules(text: &str) -> Result<Vec<IptablesRule>, (usize, ParseError)> {
    let mut rules = Vec::new();
    let mut pending = String::new();
    let mut start = 0;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        if pending.is_empty() {
            start = n + 1;
        }
        let trimmed = line.trim_end();
        let continues = trimmed.ends_with('\\');
        pending.push_str(trimmed.trim_end_matches('\\'));
        pending.push(' ');
        let next_is_option = text
            .lines()
            .nth(n + 1)
            .is_some_and(|l| l.starts_with(char::is_whitespace) && !l.trim().is_empty());
        if continues || next_is_option {
            continue;
        }
        if !pending.trim().is_empty() {
            rules.push(parse_rule(pending.trim()).map_err(|e| (start, e))?);
        }
        pending.clear();
    }
    if !pending.trim().is_empty() {
        rules.push(parse_rule(pending.trim()).map_err(|e| (start, e))?);
    }
    Ok(rules)
}

/// Ordered rule lists per chain after applying append/insert/delete.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RuleSet {
    pub forward: Vec<IptablesRule>,
    pub prerouting: Vec<IptablesRule>,
    pub postrouting: Vec<IptablesRule>,
}

impl RuleSet {
    pub fn chain(&self, chain: Chain) -> &[IptablesRule] {
        match chain {
            Chain::Forward => &self.forward,
            Chain::Prerouting => &self.prerouting,
            Chain::Postrouting => &self.postrouting,
        }
    }

    fn chain_mut(&mut self, chain: Chain) -> &mut Vec<IptablesRule> {
        match chain {
            Chain::Forward => &mut self.forward,
            Chain::Prerouting => &mut self.prerouting,
            Chain::Postrouting => &mut self.postrouting,
        }
    }

    /// Applies the commands in order. Deleting a rule that is not present is
    /// a no-op, as is inserting past the end (it appends).
    pub fn build(rules: &[IptablesRule]) -> RuleSet {
        let mut set = RuleSet::default();
        for r in rules {
            let list = set.chain_mut(r.chain);
            let stored = IptablesRule {
                command: Command::Append,
                ..r.clone()
            };
            match r.command {
                Command::Append => list.push(stored),
                Command::Insert(pos) => list.insert((pos - 1).min(list.len()), stored),
                Command::Delete => {
                    if let Some(i) = list.iter().position(|x| x.same_rule(&stored)) {
                        list.remove(i);
                    }
                }
            }
        }
        set
    }
}
