//! Text formats: TNTP network files, the role sidecar and trip tables.
//!
//! TNTP grammar accepted here:
//!
//! ```text
//! <NUMBER OF NODES> 24
//! <NUMBER OF LINKS> 76
//! <END OF METADATA>
//! ~ init term capacity length fft b power ...
//!   1    2   25900.2  6  6  0.15  4 ... ;
//! ```
//!
//! Other metadata tags are ignored. `~` starts a comment. Fields after the
//! BPR exponent are ignored, and `b`/`power` default to 0.15/4 when absent.

use super::{Link, Network, NetworkError, OdPair, TripTable, DEFAULT_BPR_ALPHA, DEFAULT_BPR_BETA};

/// Zero-based node sets for origins, destinations and candidate facilities.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeRoles {
    pub origins: Vec<usize>,
    pub destinations: Vec<usize>,
    pub candidates: Vec<usize>,
}

fn parse_err(line: usize, message: impl Into<String>) -> NetworkError {
    NetworkError::Parse {
        line,
        message: message.into(),
    }
}

fn strip_comment<'a>(line: &'a str, marker: char) -> &'a str {
    match line.find(marker) {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse_f64(token: &str, line: usize, what: &str) -> Result<f64, NetworkError> {
    token
        .parse::<f64>()
        .map_err(|_| parse_err(line, format!("invalid {what} '{token}'")))
}

fn parse_node(token: &str, line: usize, node_count: usize) -> Result<usize, NetworkError> {
    let id: usize = token
        .parse()
        .map_err(|_| parse_err(line, format!("invalid node id '{token}'")))?;
    if id == 0 || id > node_count {
        return Err(parse_err(
            line,
            format!("node id {id} outside 1..={node_count}"),
        ));
    }
    Ok(id - 1)
}

/// Parses a TNTP network file and attaches the given node roles.
pub fn parse_network(text: &str, roles: NodeRoles) -> Result<Network, NetworkError> {
    let mut node_count: Option<usize> = None;
    let mut link_count: Option<usize> = None;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut metadata_end = false;

    for (no, raw) in lines.by_ref() {
        let line = strip_comment(raw, '~').trim();
        if line.is_empty() {
            continue;
        }
        let Some(rest) = line.strip_prefix('<') else {
            return Err(parse_err(no, "expected a metadata tag before <END OF METADATA>"));
        };
        let Some((tag, value)) = rest.split_once('>') else {
            return Err(parse_err(no, "unterminated metadata tag"));
        };
        let value = value.trim();
        match tag.trim().to_ascii_uppercase().as_str() {
            "END OF METADATA" => {
                metadata_end = true;
                break;
            }
            "NUMBER OF NODES" => {
                node_count = Some(value.parse().map_err(|_| {
                    parse_err(no, format!("invalid node count '{value}'"))
                })?)
            }
            "NUMBER OF LINKS" => {
                link_count = Some(value.parse().map_err(|_| {
                    parse_err(no, format!("invalid link count '{value}'"))
                })?)
            }
            _ => {}
        }
    }
    let last_line = text.lines().count().max(1);
    if !metadata_end {
        return Err(parse_err(last_line, "missing <END OF METADATA>"));
    }
    let node_count = node_count.ok_or_else(|| parse_err(last_line, "missing <NUMBER OF NODES>"))?;
    let link_count = link_count.ok_or_else(|| parse_err(last_line, "missing <NUMBER OF LINKS>"))?;

    let mut links = Vec::with_capacity(link_count);
    for (no, raw) in lines {
        let line = strip_comment(raw, '~').trim();
        let line = line.strip_suffix(';').unwrap_or(line).trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 5 {
            return Err(parse_err(
                no,
                format!("link record needs at least 5 fields, found {}", fields.len()),
            ));
        }
        let tail = parse_node(fields[0], no, node_count)?;
        let head = parse_node(fields[1], no, node_count)?;
        let capacity = parse_f64(fields[2], no, "capacity")?;
        let fft = parse_f64(fields[4], no, "free-flow time")?;
        let alpha = match fields.get(5) {
            Some(t) => parse_f64(t, no, "BPR alpha")?,
            None => DEFAULT_BPR_ALPHA,
        };
        let beta = match fields.get(6) {
            Some(t) => {
                let p = parse_f64(t, no, "BPR power")?;
                if p.fract() != 0.0 || p < 1.0 || p > 32.0 {
                    return Err(parse_err(
                        no,
                        format!("BPR power must be an integer in 1..=32, found {t}"),
                    ));
                }
                p as u32
            }
            None => DEFAULT_BPR_BETA,
        };
        let link = Link {
            tail,
            head,
            free_flow_time: fft,
            capacity,
            alpha,
            beta,
        };
        link.validate(links.len(), node_count)
            .map_err(|e| parse_err(no, e.to_string()))?;
        links.push(link);
    }
    if links.len() != link_count {
        return Err(parse_err(
            last_line,
            format!("declared {link_count} links, found {}", links.len()),
        ));
    }
    Network::new(node_count, links, roles)
}

/// Parses the role sidecar. Section names `ORIGINS`, `DESTINATIONS` and
/// `CANDIDATES` switch the current section; other tokens are one-based node
/// ids. `#` starts a comment.
pub fn parse_roles(text: &str) -> Result<NodeRoles, NetworkError> {
    #[derive(Clone, Copy)]
    enum Section {
        Origins,
        Destinations,
        Candidates,
    }
    let mut roles = NodeRoles::default();
    let mut current: Option<Section> = None;
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        for token in strip_comment(raw, '#').split_whitespace() {
            match token.to_ascii_uppercase().as_str() {
                "ORIGINS" => current = Some(Section::Origins),
                "DESTINATIONS" => current = Some(Section::Destinations),
                "CANDIDATES" => current = Some(Section::Candidates),
                _ => {
                    let section =
                        current.ok_or_else(|| parse_err(no, "node id before any section"))?;
                    let id: usize = token
                        .parse()
                        .map_err(|_| parse_err(no, format!("invalid node id '{token}'")))?;
                    if id == 0 {
                        return Err(parse_err(no, "node ids are one-based"));
                    }
                    let list = match section {
                        Section::Origins => &mut roles.origins,
                        Section::Destinations => &mut roles.destinations,
                        Section::Candidates => &mut roles.candidates,
                    };
                    if list.contains(&(id - 1)) {
                        return Err(parse_err(no, format!("duplicate node id {id}")));
                    }
                    list.push(id - 1);
                }
            }
        }
    }
    if roles.candidates.is_empty() {
        return Err(parse_err(text.lines().count().max(1), "no CANDIDATES declared"));
    }
    Ok(roles)
}

/// Parses a trip table with records `r s d e [k ...]`, one pair per line.
/// Without a facility list every candidate is allowed.
pub fn parse_trips(text: &str, network: &Network) -> Result<TripTable, NetworkError> {
    let n = network.node_count();
    let mut pairs: Vec<OdPair> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let fields: Vec<&str> = strip_comment(raw, '#').split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 4 {
            return Err(parse_err(no, "trip record needs r s demand service"));
        }
        let origin = parse_node(fields[0], no, n)?;
        let destination = parse_node(fields[1], no, n)?;
        if !network.origins().contains(&origin) {
            return Err(NetworkError::UnknownNode {
                role: "origin",
                node: origin + 1,
            });
        }
        if !network.destinations().contains(&destination) {
            return Err(NetworkError::UnknownNode {
                role: "destination",
                node: destination + 1,
            });
        }
        let demand = parse_f64(fields[2], no, "demand")?;
        let service = parse_f64(fields[3], no, "service quantity")?;
        let facilities = if fields.len() > 4 {
            let mut ks = Vec::new();
            for t in &fields[4..] {
                let node = parse_node(t, no, n)?;
                let k = network.location_of(node).ok_or(NetworkError::UnknownNode {
                    role: "candidate",
                    node: node + 1,
                })?;
                if !ks.contains(&k) {
                    ks.push(k);
                }
            }
            ks
        } else {
            (0..network.location_count()).collect()
        };
        if pairs
            .iter()
            .any(|p| p.origin == origin && p.destination == destination)
        {
            return Err(parse_err(
                no,
                format!("duplicate pair ({}, {})", origin + 1, destination + 1),
            ));
        }
        pairs.push(OdPair {
            origin,
            destination,
            demand,
            service,
            facilities,
        });
    }
    TripTable::new(pairs, network)
}
