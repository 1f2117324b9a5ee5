use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use super::{CensusError, LocationAggregate};
use crate::model::{Domain, RttSample, RttTable, VantageId};

const RTT_HEADER: [&str; 4] = ["domain", "vantage", "rtt_ms", "measured_at"];

fn parse_err(source: &str, line: usize, msg: impl Into<String>) -> CensusError {
    CensusError::Parse {
        path: source.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Targets file: one domain per line, `#` starts a comment.
pub fn read_targets<R: Read>(reader: R, source: &str) -> Result<Vec<Domain>, CensusError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let d = Domain::new(content).map_err(|e| parse_err(source, i + 1, e.to_string()))?;
        out.push(d);
    }
    Ok(out)
}

fn csv_records<R: Read>(
    reader: R,
    source: &str,
    header: &[&str],
) -> Result<Vec<(usize, csv::StringRecord)>, CensusError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let got = rdr
        .headers()
        .map_err(|e| parse_err(source, 1, e.to_string()))?
        .clone();
    if got.iter().collect::<Vec<_>>() != header {
        return Err(parse_err(
            source,
            1,
            format!("expected header {:?}, got {:?}", header.join(","), got),
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(source, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(parse_err(source, line, "wrong field count"));
        }
        out.push((line, rec));
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    idx: usize,
    name: &str,
    source: &str,
    line: usize,
) -> Result<T, CensusError> {
    rec[idx]
        .parse()
        .map_err(|_| parse_err(source, line, format!("bad {name}: {:?}", &rec[idx])))
}

pub fn read_rtt_csv<R: Read>(reader: R, source: &str) -> Result<RttTable, CensusError> {
    let mut table = RttTable::new();
    for (line, rec) in csv_records(reader, source, &RTT_HEADER)? {
        let wrap = |e: crate::model::ModelError| parse_err(source, line, e.to_string());
        let domain = Domain::new(&rec[0]).map_err(wrap)?;
        let vantage = VantageId::new(&rec[1]).map_err(wrap)?;
        let rtt: f64 = field(&rec, 2, "rtt_ms", source, line)?;
        let at: u64 = field(&rec, 3, "measured_at", source, line)?;
        let sample = RttSample::new(domain, vantage, rtt, at).map_err(wrap)?;
        table.insert(sample).map_err(wrap)?;
    }
    Ok(table)
}

pub fn write_rtt_csv<W: Write>(table: &RttTable, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", RTT_HEADER.join(","))?;
    for s in table.samples() {
        writeln!(w, "{},{},{:.3},{}", s.domain, s.vantage, s.rtt_ms, s.measured_at)?;
    }
    Ok(())
}

pub fn read_geo_csv<R: Read>(
    reader: R,
    source: &str,
) -> Result<BTreeMap<Domain, (f64, f64)>, CensusError> {
    let mut out = BTreeMap::new();
    for (line, rec) in csv_records(reader, source, &["domain", "lat", "lon"])? {
        let domain = Domain::new(&rec[0]).map_err(|e| parse_err(source, line, e.to_string()))?;
        let lat: f64 = field(&rec, 1, "lat", source, line)?;
        let lon: f64 = field(&rec, 2, "lon", source, line)?;
        out.insert(domain, (lat, lon));
    }
    Ok(out)
}

pub fn read_org_csv<R: Read>(reader: R, source: &str) -> Result<Vec<(Domain, String)>, CensusError> {
    csv_records(reader, source, &["domain", "orgname"])?
        .into_iter()
        .map(|(line, rec)| {
            let d = Domain::new(&rec[0]).map_err(|e| parse_err(source, line, e.to_string()))?;
            Ok((d, rec[1].to_string()))
        })
        .collect()
}

pub fn read_alias_csv<R: Read>(
    reader: R,
    source: &str,
) -> Result<BTreeMap<String, String>, CensusError> {
    Ok(csv_records(reader, source, &["alias", "canonical"])?
        .into_iter()
        .map(|(_, rec)| (rec[0].to_string(), rec[1].to_string()))
        .collect())
}

pub fn write_location_csv<W: Write>(rows: &[LocationAggregate], mut w: W) -> std::io::Result<()> {
    writeln!(w, "lat,lon,domain_count,mean_rtt_ms")?;
    for r in rows {
        writeln!(w, "{:.1},{:.1},{},{:.3}", r.lat, r.lon, r.domain_count, r.mean_rtt_ms)?;
    }
    Ok(())
}
