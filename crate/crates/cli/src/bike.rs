//! Hourly bike-rental records turned into one functional subject per
//! Saturday: hourly temperature (°C) as the covariate curve, log(1 + casual
//! rentals) as the response curve and the day's mean humidity as a scalar.
//!
//! Two layouts of the hourly table are understood. Both carry `hr`,
//! `weekday`, `temp`, `hum` and `casual`; the day is named by `dteday`
//! (calendar date) or by `day` (day of the year).

use std::collections::BTreeMap;
use std::io::Read;

use affpc::funcdata::{FunctionalDataset, Interval, SubjectRecord};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CliError;

/// Normalized temperatures are `(t - t_min) / (t_max - t_min)`.
pub const TEMP_MIN_C: f64 = -8.0;
pub const TEMP_MAX_C: f64 = 39.0;
pub const SATURDAY: u32 = 6;
/// Days with fewer observed hours are skipped.
pub const MIN_HOURS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BikeDay {
    pub id: String,
    pub hours: Vec<f64>,
    pub temp_c: Vec<f64>,
    pub log_casual: Vec<f64>,
    pub mean_humidity: f64,
}

fn column(headers: &csv::StringRecord, names: &[&str]) -> Result<usize, CliError> {
    headers
        .iter()
        .position(|h| names.contains(&h.trim()))
        .ok_or_else(|| CliError::Input(format!("hourly table: missing column '{}'", names.join("' or '"))))
}

fn number(raw: &str) -> Option<f64> {
    raw.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Saturdays of an hourly table, in file order. Hours with an unparsable
/// temperature or count are dropped.
pub fn read_saturdays<R: Read>(reader: R) -> Result<Vec<BikeDay>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let day = column(&headers, &["dteday", "day"])?;
    let hr = column(&headers, &["hr"])?;
    let weekday = column(&headers, &["weekday"])?;
    let temp = column(&headers, &["temp"])?;
    let hum = column(&headers, &["hum"])?;
    let casual = column(&headers, &["casual"])?;

    struct Acc {
        hours: BTreeMap<u32, (f64, f64)>,
        humidity: Vec<f64>,
    }
    let mut order = Vec::new();
    let mut days: BTreeMap<String, Acc> = BTreeMap::new();
    let mut dropped = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let wd: u32 = rec[weekday]
            .parse()
            .map_err(|_| CliError::Input(format!("hourly table row {row}: column 'weekday' is not an integer")))?;
        if wd != SATURDAY {
            continue;
        }
        let h: u32 = rec[hr]
            .parse()
            .map_err(|_| CliError::Input(format!("hourly table row {row}: column 'hr' is not an integer")))?;
        let key = rec[day].to_string();
        let acc = days.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            Acc {
                hours: BTreeMap::new(),
                humidity: Vec::new(),
            }
        });
        if let Some(v) = number(&rec[hum]) {
            acc.humidity.push(v);
        }
        match (number(&rec[temp]), number(&rec[casual])) {
            (Some(t), Some(c)) if c >= 0.0 => {
                let celsius = TEMP_MIN_C + t * (TEMP_MAX_C - TEMP_MIN_C);
                if acc.hours.insert(h, (celsius, (1.0 + c).ln())).is_some() {
                    return Err(CliError::Input(format!("hourly table row {row}: hour {h} repeated for day '{key}'")));
                }
            }
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} Saturday hour(s) with missing values");
    }
    let mut out = Vec::new();
    for id in order {
        let acc = days.remove(&id).expect("day recorded");
        if acc.hours.len() < MIN_HOURS || acc.humidity.is_empty() {
            log::warn!("skipping day '{id}': only {} usable hours", acc.hours.len());
            continue;
        }
        let hours = acc.hours.keys().map(|&h| h as f64).collect();
        let (temp_c, log_casual) = acc.hours.values().copied().unzip();
        out.push(BikeDay {
            id,
            hours,
            temp_c,
            log_casual,
            mean_humidity: acc.humidity.iter().sum::<f64>() / acc.humidity.len() as f64,
        });
    }
    if out.is_empty() {
        return Err(CliError::Input("hourly table: no Saturdays found".into()));
    }
    Ok(out)
}

/// Functional dataset over hours `[0, 23]` with scalar `avg_humidity`.
pub fn to_dataset(days: &[BikeDay]) -> Result<FunctionalDataset, CliError> {
    let subjects = days
        .iter()
        .map(|d| {
            SubjectRecord::new(d.id.clone(), d.hours.clone(), d.temp_c.clone(), d.hours.clone(), d.log_casual.clone())
                .with_scalars(vec![d.mean_humidity])
        })
        .collect();
    let hours = Interval { lo: 0.0, hi: 23.0 };
    Ok(FunctionalDataset::new(subjects, hours, hours)?.with_scalar_names(vec!["avg_humidity".into()])?)
}

/// Seeded split into `train_size` training and the remaining test indices,
/// each in increasing order.
pub fn split(n: usize, train_size: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), CliError> {
    if train_size < 2 || train_size >= n {
        return Err(CliError::Input(format!(
            "train_size must lie in [2, {}) for {n} days, got {train_size}",
            n
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..train_size].to_vec();
    let mut test = idx[train_size..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE: &str = "\
instant,dteday,season,yr,mnth,hr,holiday,weekday,workingday,weathersit,temp,atemp,hum,windspeed,casual,registered,cnt
1,2011-01-01,1,0,1,0,0,6,0,1,0.24,0.2879,0.81,0,3,13,16
2,2011-01-01,1,0,1,1,0,6,0,1,0.22,0.2727,0.80,0,8,32,40
3,2011-01-01,1,0,1,2,0,6,0,1,0.22,0.2727,0.80,0,5,27,32
4,2011-01-01,1,0,1,3,0,6,0,1,0.24,0.2879,0.75,0,3,10,13
5,2011-01-01,1,0,1,5,0,6,0,1,0.24,0.2576,0.75,0.0896,0,1,1
6,2011-01-02,1,0,1,0,0,0,0,2,0.46,0.4545,0.88,0.2985,4,13,17
";

    #[test]
    fn saturdays_are_converted() {
        let days = read_saturdays(TABLE.as_bytes()).unwrap();
        assert_eq!(days.len(), 1);
        let d = &days[0];
        assert_eq!(d.id, "2011-01-01");
        assert_eq!(d.hours, vec![0.0, 1.0, 2.0, 3.0, 5.0]);
        assert!((d.temp_c[0] - (-8.0 + 0.24 * 47.0)).abs() < 1e-12);
        assert!((d.log_casual[0] - 4f64.ln()).abs() < 1e-12);
        assert!((d.mean_humidity - 0.782).abs() < 1e-12);
        let ds = to_dataset(&days).unwrap();
        assert_eq!(ds.scalar_names(), ["avg_humidity".to_string()]);
    }

    #[test]
    fn day_of_year_layout_is_accepted() {
        let t = "season,mnth,day,hr,holiday,weekday,workingday,weathersit,temp,atemp,hum,windspeed,casual,registered,bikers\n\
                 1,Jan,1,0,0,6,0,clear,0.24,0.2879,0.81,0,3,13,16\n\
                 1,Jan,1,1,0,6,0,clear,0.22,0.2727,0.8,0,8,32,40\n\
                 1,Jan,1,2,0,6,0,clear,0.22,0.2727,0.8,0,5,27,32\n\
                 1,Jan,1,3,0,6,0,clear,0.24,0.2879,0.75,0,3,10,13\n";
        let days = read_saturdays(t.as_bytes()).unwrap();
        assert_eq!(days[0].id, "1");
        assert_eq!(days[0].hours.len(), 4);
    }

    #[test]
    fn missing_columns_are_named() {
        let err = read_saturdays("dteday,hr,weekday,temp,hum\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("casual"));
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (a, b) = split(105, 89, 1).unwrap();
        assert_eq!((a.len(), b.len()), (89, 16));
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(split(105, 89, 1).unwrap(), (a.clone(), b));
        assert_ne!(split(105, 89, 2).unwrap().0, a);
        assert!(split(10, 10, 1).is_err());
    }
}
