//! CSV reading and writing for cohorts and transition datasets.
//!
//! A cohort directory holds `static.csv` (one row per episode) and
//! `steps.csv` (one row per episode-step; empty cells mark missing
//! values). Column layouts are documented in `docs/csv-schema.md`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Result, VentError};
use crate::ingest::{
    flag_sepsis, EpisodeRecord, RawEpisode, StaticFields, StepRow, Transition,
};
use crate::mdp::{ActionTriple, StateVector};
use crate::schema::{StateFeature, StepVar, N_STEP_VARS, STATE_DIM, TARGET_STATE_INDICES};

pub const STATIC_CSV: &str = "static.csv";
pub const STEPS_CSV: &str = "steps.csv";
pub const TRANSITIONS_CSV: &str = "transitions.csv";

fn csv_err(path: &Path, msg: impl std::fmt::Display) -> VentError {
    VentError::Csv { path: path.display().to_string(), message: msg.to_string() }
}

fn parse_f64(path: &Path, field: &str, raw: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| csv_err(path, format!("field `{field}`: cannot parse `{raw}` as a number")))
}

fn parse_bool(path: &Path, field: &str, raw: &str) -> Result<bool> {
    match raw.trim() {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        other => Err(csv_err(path, format!("field `{field}`: expected 0/1, got `{other}`"))),
    }
}

fn header_index(path: &Path, headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| csv_err(path, format!("missing column `{name}`")))
}

struct StaticRow {
    statics: StaticFields,
}

fn read_static_csv(path: &Path) -> Result<BTreeMap<String, StaticRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let idx_id = header_index(path, &headers, "episode_id")?;
    let idx_sex = header_index(path, &headers, "sex")?;
    let idx_codes = headers.iter().position(|h| h == "icd9_codes");
    let idx_sepsis = headers.iter().position(|h| h == "sepsis");
    if idx_codes.is_none() && idx_sepsis.is_none() {
        return Err(csv_err(path, "need either an `icd9_codes` or a `sepsis` column"));
    }
    let idx_weight = header_index(path, &headers, "weight_kg")?;
    let idx_age = header_index(path, &headers, "age_years")?;
    let idx_mort = header_index(path, &headers, "mortality_90d")?;
    let idx_readm = header_index(path, &headers, "icu_readmission")?;

    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let id = record.get(idx_id).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(csv_err(path, "empty episode_id"));
        }
        let sepsis = match idx_codes.and_then(|i| record.get(i)).map(str::trim) {
            Some(codes) if !codes.is_empty() => {
                let list: Vec<String> = codes.split(';').map(|c| c.trim().to_string()).collect();
                flag_sepsis(&list)
            }
            _ => match idx_sepsis.and_then(|i| record.get(i)) {
                Some(raw) if !raw.trim().is_empty() => parse_bool(path, "sepsis", raw)?,
                _ => {
                    return Err(csv_err(
                        path,
                        format!("episode {id}: neither icd9_codes nor sepsis populated"),
                    ))
                }
            },
        };
        let statics = StaticFields {
            sex: parse_f64(path, "sex", record.get(idx_sex).unwrap_or(""))?,
            sepsis,
            weight_kg: parse_f64(path, "weight_kg", record.get(idx_weight).unwrap_or(""))?,
            age_years: parse_f64(path, "age_years", record.get(idx_age).unwrap_or(""))?,
            mortality_90d: parse_bool(path, "mortality_90d", record.get(idx_mort).unwrap_or(""))?,
            icu_readmission: parse_bool(
                path,
                "icu_readmission",
                record.get(idx_readm).unwrap_or(""),
            )?,
        };
        if out.insert(id.clone(), StaticRow { statics }).is_some() {
            return Err(csv_err(path, format!("duplicate episode_id `{id}`")));
        }
    }
    Ok(out)
}

fn read_steps_csv(path: &Path) -> Result<BTreeMap<String, Vec<(usize, StepRow)>>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let idx_id = header_index(path, &headers, "episode_id")?;
    let idx_step = header_index(path, &headers, "step")?;
    let mut var_idx = [0usize; N_STEP_VARS];
    for var in StepVar::ALL {
        var_idx[var.index()] = header_index(path, &headers, var.name())?;
    }

    let mut out: BTreeMap<String, Vec<(usize, StepRow)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let id = record.get(idx_id).unwrap_or("").trim().to_string();
        let step: usize = record
            .get(idx_step)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| csv_err(path, format!("episode {id}: bad step index")))?;
        let mut row: StepRow = [None; N_STEP_VARS];
        for var in StepVar::ALL {
            let raw = record.get(var_idx[var.index()]).unwrap_or("").trim();
            if !raw.is_empty() {
                row[var.index()] = Some(parse_f64(path, var.name(), raw)?);
            }
        }
        out.entry(id).or_default().push((step, row));
    }
    Ok(out)
}

/// Read a cohort directory (`static.csv` + `steps.csv`) into raw episodes,
/// ordered by episode id. Step indices must be contiguous from 0.
pub fn read_raw_cohort(dir: &Path) -> Result<Vec<RawEpisode>> {
    let statics = read_static_csv(&dir.join(STATIC_CSV))?;
    let steps_path = dir.join(STEPS_CSV);
    let mut steps = read_steps_csv(&steps_path)?;

    let mut out = Vec::with_capacity(statics.len());
    for (id, row) in statics {
        let mut ep_steps = steps.remove(&id).ok_or_else(|| {
            csv_err(&steps_path, format!("episode {id} has no step rows"))
        })?;
        ep_steps.sort_by_key(|(t, _)| *t);
        for (pos, (t, _)) in ep_steps.iter().enumerate() {
            if *t != pos {
                return Err(csv_err(
                    &steps_path,
                    format!("episode {id}: step indices not contiguous from 0 (found {t} at position {pos})"),
                ));
            }
        }
        out.push(RawEpisode {
            episode_id: id,
            statics: row.statics,
            steps: ep_steps.into_iter().map(|(_, r)| r).collect(),
        });
    }
    if let Some(id) = steps.keys().next() {
        return Err(csv_err(&steps_path, format!("episode {id} has steps but no static row")));
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write a cohort directory in the ingest schema.
pub fn write_raw_cohort(dir: &Path, episodes: &[RawEpisode]) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| VentError::io(dir.display().to_string(), e))?;
    let static_path = dir.join(STATIC_CSV);
    let mut w = csv::Writer::from_path(&static_path).map_err(|e| csv_err(&static_path, e))?;
    w.write_record([
        "episode_id",
        "sex",
        "sepsis",
        "weight_kg",
        "age_years",
        "mortality_90d",
        "icu_readmission",
    ])
    .map_err(|e| csv_err(&static_path, e))?;
    for ep in episodes {
        let s = &ep.statics;
        w.write_record([
            ep.episode_id.as_str(),
            &s.sex.to_string(),
            if s.sepsis { "1" } else { "0" },
            &s.weight_kg.to_string(),
            &s.age_years.to_string(),
            if s.mortality_90d { "1" } else { "0" },
            if s.icu_readmission { "1" } else { "0" },
        ])
        .map_err(|e| csv_err(&static_path, e))?;
    }
    w.flush().map_err(|e| csv_err(&static_path, e))?;

    let steps_path = dir.join(STEPS_CSV);
    let mut w = csv::Writer::from_path(&steps_path).map_err(|e| csv_err(&steps_path, e))?;
    let mut header = vec!["episode_id".to_string(), "step".to_string()];
    header.extend(StepVar::ALL.iter().map(|v| v.name().to_string()));
    w.write_record(&header).map_err(|e| csv_err(&steps_path, e))?;
    for ep in episodes {
        for (t, row) in ep.steps.iter().enumerate() {
            let mut record = vec![ep.episode_id.clone(), t.to_string()];
            record.extend(row.iter().map(|v| fmt_opt(*v)));
            w.write_record(&record).map_err(|e| csv_err(&steps_path, e))?;
        }
    }
    w.flush().map_err(|e| csv_err(&steps_path, e))?;
    Ok(())
}

/// Write cleaned episodes back out in the same cohort schema (all cells
/// populated).
pub fn write_records(dir: &Path, records: &[EpisodeRecord]) -> Result<()> {
    let raw: Vec<RawEpisode> = records
        .iter()
        .map(|r| RawEpisode {
            episode_id: r.episode_id.clone(),
            statics: r.statics.clone(),
            steps: r
                .steps
                .iter()
                .map(|row| {
                    let mut out: StepRow = [None; N_STEP_VARS];
                    for (j, v) in row.iter().enumerate() {
                        out[j] = Some(*v);
                    }
                    out
                })
                .collect(),
        })
        .collect();
    write_raw_cohort(dir, &raw)
}

/// Interpret a fully-observed cohort as cleaned episodes (used after
/// `preprocess` has written its output). Any missing cell is an error.
pub fn records_from_raw(episodes: Vec<RawEpisode>) -> Result<Vec<EpisodeRecord>> {
    episodes
        .into_iter()
        .map(|ep| {
            let steps = ep
                .steps
                .iter()
                .enumerate()
                .map(|(t, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| {
                            v.ok_or_else(|| {
                                VentError::data(format!(
                                    "episode {} step {t}: missing {} in a cleaned cohort",
                                    ep.episode_id,
                                    StepVar::ALL[j].name()
                                ))
                            })
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EpisodeRecord {
                episode_id: ep.episode_id,
                statics: ep.statics,
                steps,
                imputed_fraction: BTreeMap::new(),
            })
        })
        .collect()
}

/// Read a cleaned cohort directory directly into episode records.
pub fn read_records(dir: &Path) -> Result<Vec<EpisodeRecord>> {
    records_from_raw(read_raw_cohort(dir)?)
}

/// Write transitions to a columnar CSV: the full 16-dim state, action
/// bins, reward, the 13-dim next-state target, and the terminal flag.
pub fn write_transitions(path: &Path, transitions: &[Transition]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| VentError::io(parent.display().to_string(), e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["episode_id".to_string(), "t".to_string()];
    header.extend(StateFeature::ALL.iter().map(|f| format!("s_{}", f.name())));
    header.extend(["vt_bin".to_string(), "peep_bin".to_string(), "fio2_bin".to_string()]);
    header.push("reward".to_string());
    header.extend(
        TARGET_STATE_INDICES
            .iter()
            .map(|&i| format!("next_{}", StateFeature::ALL[i].name())),
    );
    header.push("terminal".to_string());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;

    for tr in transitions {
        let mut record = vec![tr.episode_id.clone(), tr.t.to_string()];
        record.extend(tr.s.0.iter().map(|v| v.to_string()));
        record.push(tr.a.vt_bin.to_string());
        record.push(tr.a.peep_bin.to_string());
        record.push(tr.a.fio2_bin.to_string());
        record.push(tr.r.to_string());
        record.extend(TARGET_STATE_INDICES.iter().map(|&i| tr.s_next.0[i].to_string()));
        record.push(if tr.terminal { "1" } else { "0" }.to_string());
        w.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))?;
    Ok(())
}

/// Read a transitions CSV written by [`write_transitions`]. The next
/// state's static features are re-attached from the current state.
pub fn read_transitions(path: &Path) -> Result<Vec<Transition>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let idx_id = header_index(path, &headers, "episode_id")?;
    let idx_t = header_index(path, &headers, "t")?;
    let mut idx_s = [0usize; STATE_DIM];
    for f in StateFeature::ALL {
        idx_s[f.index()] = header_index(path, &headers, &format!("s_{}", f.name()))?;
    }
    let idx_vt = header_index(path, &headers, "vt_bin")?;
    let idx_peep = header_index(path, &headers, "peep_bin")?;
    let idx_fio2 = header_index(path, &headers, "fio2_bin")?;
    let idx_r = header_index(path, &headers, "reward")?;
    let mut idx_next = Vec::with_capacity(TARGET_STATE_INDICES.len());
    for &i in &TARGET_STATE_INDICES {
        idx_next.push(header_index(path, &headers, &format!("next_{}", StateFeature::ALL[i].name()))?);
    }
    let idx_term = header_index(path, &headers, "terminal")?;

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let get = |i: usize| record.get(i).unwrap_or("");
        let episode_id = get(idx_id).trim().to_string();
        let t: usize = get(idx_t)
            .trim()
            .parse()
            .map_err(|_| csv_err(path, format!("episode {episode_id}: bad t")))?;
        let mut s = [0.0; STATE_DIM];
        for f in StateFeature::ALL {
            s[f.index()] = parse_f64(path, f.name(), get(idx_s[f.index()]))?;
        }
        let s = StateVector(s);
        let a = ActionTriple::new(
            parse_f64(path, "vt_bin", get(idx_vt))? as u8,
            parse_f64(path, "peep_bin", get(idx_peep))? as u8,
            parse_f64(path, "fio2_bin", get(idx_fio2))? as u8,
        )?;
        let r = parse_f64(path, "reward", get(idx_r))?;
        let mut s_next = s;
        for (k, &i) in TARGET_STATE_INDICES.iter().enumerate() {
            s_next.0[i] = parse_f64(path, "next", get(idx_next[k]))?;
        }
        let terminal = parse_bool(path, "terminal", get(idx_term))?;
        out.push(Transition { episode_id, t, s, a, r, s_next, terminal });
    }
    Ok(out)
}
