mod common;

use std::fs;
use std::path::PathBuf;

use chrono::NaiveDate;
use common::reported;
use epirkhs::bayes::CredibleBand;
use epirkhs::data::{self, ObservationSeries, SynthSpec};
use epirkhs::sir::{self, SirParams, TimeGrid};
use epirkhs::Error;
use proptest::prelude::*;

fn date(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

const REGIONAL: &str = "\
data,stato,codice_regione,denominazione_regione,terapia_intensiva,totale_positivi
2020-03-02T18:00:00,ITA,3,Lombardia,135,1200
2020-03-01T18:00:00,ITA,3,Lombardia,127,984
2020-03-01T18:00:00,ITA,5,Veneto,19,263
2020-03-03T18:00:00,ITA,3,Lombardia,167,1520
2020-03-02T18:00:00,ITA,5,Veneto,23,271
2020-03-03T18:00:00,ITA,5,Veneto,26,307
";

const NATIONAL: &str = "\
data,stato,terapia_intensiva
2020-03-01T18:00:00,ITA,146
2020-03-02T18:00:00,ITA,158
2020-03-03T18:00:00,ITA,193
";

#[test]
fn ingest_regional_and_national() {
    let dir = tempfile::tempdir().unwrap();
    let reg = write(&dir, "regioni.csv", REGIONAL);
    let s = data::ingest_dpc_csv(&reg, "Lombardia", 1e7).unwrap();
    assert_eq!(s.len(), 3);
    assert_eq!(s.icu_counts, vec![127, 135, 167]);
    assert_eq!(s.start(), Some(date("2020-03-01")));
    for (y, c) in s.y.iter().zip(&s.icu_counts) {
        assert_eq!(*y, *c as f64 / 1e7);
        assert_eq!(y * s.population, *c as f64);
    }

    let nat = write(&dir, "italia.csv", NATIONAL);
    let italy = data::ingest_dpc_csv(&nat, "Italia", data::ITALY_POPULATION).unwrap();
    assert_eq!(italy.icu_counts, vec![146, 158, 193]);

    let totals = data::regional_totals(&reg).unwrap();
    for (d, c) in italy.dates.iter().zip(&italy.icu_counts) {
        assert_eq!(totals[d], *c);
    }
}

#[test]
fn ingest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let no_icu = write(&dir, "a.csv", "data,denominazione_regione,totale_positivi\n2020-03-01T18:00:00,Lombardia,3\n");
    assert!(matches!(
        data::ingest_dpc_csv(&no_icu, "Lombardia", 1e7),
        Err(Error::SchemaMismatch { column, .. }) if column == "terapia_intensiva"
    ));
    let gap = write(
        &dir,
        "b.csv",
        "data,denominazione_regione,terapia_intensiva\n2020-03-01T18:00:00,Lombardia,3\n2020-03-03T18:00:00,Lombardia,4\n",
    );
    assert!(matches!(data::ingest_dpc_csv(&gap, "Lombardia", 1e7), Err(Error::GapInDates { .. })));
    let neg = write(&dir, "c.csv", "data,terapia_intensiva\n2020-03-01T18:00:00,-2\n");
    assert!(matches!(data::ingest_dpc_csv(&neg, "Italia", 1e7), Err(Error::NegativeCount { count: -2, .. })));
    assert!(matches!(data::ingest_dpc_csv(dir.path().join("missing.csv"), "Italia", 1e7), Err(Error::Csv { .. })));
}

fn daily(start: &str, n: usize) -> ObservationSeries {
    let d0 = date(start);
    let dates = (0..n).map(|k| d0 + chrono::Days::new(k as u64)).collect();
    ObservationSeries::new("Lombardia", dates, (0..n as u64).collect(), 1e7).unwrap()
}

#[test]
fn windows() {
    let s = daily("2020-03-01", 170);
    let full = data::window(&s, s.start().unwrap(), s.end().unwrap()).unwrap();
    assert_eq!(full, s);
    let one = data::window(&s, date("2020-04-02"), date("2020-04-02")).unwrap();
    assert_eq!(one.len(), 1);
    let lockdown = data::window(&s, date("2020-03-01"), date("2020-05-17")).unwrap();
    assert_eq!(lockdown.len(), 31 + 30 + 17);
    assert!(matches!(data::window(&s, date("2021-01-01"), date("2021-02-01")), Err(Error::EmptyWindow { .. })));
}

fn lombardy_like(noise_sd: f64, seed: u64) -> data::SyntheticSeries {
    let th = reported();
    let params = SirParams::new(th.b, th.h).unwrap();
    let init = sir::initial_state(1.27e-5, &params, th.a1).unwrap();
    let spec = SynthSpec { region: "Lombardia", start: date("2020-03-01"), population: 1e7, noise_sd, seed };
    data::synth_generate(&th.contact(8.0, 78.0), &params, init, &TimeGrid::daily(78), &spec).unwrap()
}

#[test]
fn synthetic_generation() {
    let clean = lombardy_like(0.0, 1);
    let th = reported();
    let params = SirParams::new(th.b, th.h).unwrap();
    assert_eq!(clean.clean, sir::model_output(&clean.trajectory, &params));
    assert_eq!(clean.noisy, clean.clean);
    assert_eq!(clean.series.len(), 78);

    let a = lombardy_like(18.8 / 1e7, 42);
    let b = lombardy_like(18.8 / 1e7, 42);
    assert_eq!(a.series, b.series);
    assert_eq!(a.noisy.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.noisy.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_ne!(lombardy_like(18.8 / 1e7, 43).noisy, a.noisy);
    for (c, y) in a.series.icu_counts.iter().zip(&a.noisy) {
        assert_eq!(*c, (y.max(0.0) * 1e7).round() as u64);
    }
}

#[test]
fn projection_examples() {
    let s = daily("2020-03-01", 10);
    let zero = ObservationSeries::new("Italia", s.dates.clone(), vec![0; 10], data::ITALY_POPULATION).unwrap();
    assert!(data::national_projection(1467.8, &zero).iter().all(|v| *v == 0.0));
    let unit = data::national_projection(1.0, &s);
    assert_eq!(unit, s.y);
    let h = 1467.8;
    let peak = ObservationSeries::new("Italia", vec![date("2020-04-03")], vec![740], data::ITALY_POPULATION).unwrap();
    assert!((data::national_projection(h, &peak)[0] - 0.018).abs() < 5e-4);
}

#[test]
fn total_infected_projection() {
    // constant ICU occupancy: I stays at H·y and R grows linearly at rate b·I
    let (h, b, a_pre) = (1000.0, 0.1, 0.3);
    let dates: Vec<NaiveDate> = (0..11).map(|k| date("2020-03-01") + chrono::Days::new(k)).collect();
    let s = ObservationSeries::new("Italia", dates, vec![600; 11], 6e7).unwrap();
    let tot = data::national_total_infected(h, b, a_pre, &s).unwrap();
    let i = h * 600.0 / 6e7;
    let r0 = i * (b / a_pre) / (1.0 - b / a_pre);
    for (k, v) in tot.iter().enumerate() {
        assert!((v - (i + r0 + b * i * k as f64)).abs() < 1e-15);
    }
    assert!(data::national_total_infected(h, 0.4, 0.3, &s).is_err());
}

fn band(n: usize) -> CredibleBand {
    let times: Vec<f64> = (0..n).map(|k| k as f64 * 0.7).collect();
    let center: Vec<f64> = times.iter().map(|t| (t * 1.3).sin() / 3.0 + 1.0 / 7.0).collect();
    CredibleBand {
        lower: center.iter().map(|c| c - std::f64::consts::PI * 1e-3).collect(),
        upper: center.iter().map(|c| c + std::f64::consts::E * 1e-3).collect(),
        center,
        times,
        level: 0.95,
    }
}

#[test]
fn band_export() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    assert!(data::export_band(&band(0), &empty).is_err());
    assert!(!empty.exists());

    let three = dir.path().join("three.csv");
    data::export_band(&band(3), &three).unwrap();
    let text = fs::read_to_string(&three).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(text.lines().next(), Some("t,lower,center,upper"));
}

#[test]
fn fit_and_trajectory_export_headers() {
    let dir = tempfile::tempdir().unwrap();
    let fit = dir.path().join("fit.csv");
    let row = data::FitRow { t: 0.0, y_observed: 1e-5, y_fitted: 1.1e-5, a_hat: 0.27, gamma_hat: 3.55 };
    data::export_fit(&[row, row], &fit).unwrap();
    assert_eq!(fs::read_to_string(&fit).unwrap().lines().next(), Some("t,y_observed,y_fitted,a_hat,gamma_hat"));
    let traj = dir.path().join("traj.csv");
    data::export_trajectory(&lombardy_like(0.0, 0).trajectory, &traj).unwrap();
    let text = fs::read_to_string(&traj).unwrap();
    assert_eq!(text.lines().next(), Some("t,s,i,r"));
    assert_eq!(text.lines().count(), 79);
}

#[test]
fn dpc_writer_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let s = lombardy_like(18.8 / 1e7, 5).series;
    let p = dir.path().join("regioni.csv");
    data::write_dpc_csv(&[&s], true, &p).unwrap();
    assert_eq!(data::ingest_dpc_csv(&p, "Lombardia", 1e7).unwrap(), s);
}

proptest! {
    #[test]
    fn band_round_trip_is_exact(values in prop::collection::vec((-1e3f64..1e3, 0.0f64..1.0, 0.0f64..1.0), 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let mut b = CredibleBand { times: vec![], lower: vec![], center: vec![], upper: vec![], level: 0.9 };
        for (k, (c, lo, hi)) in values.iter().enumerate() {
            b.times.push(k as f64 / 3.0);
            b.center.push(*c);
            b.lower.push(c - lo);
            b.upper.push(c + hi);
        }
        let p = dir.path().join("band.csv");
        data::export_band(&b, &p).unwrap();
        let back = data::read_band(&p, 0.9).unwrap();
        prop_assert_eq!(back, b);
    }

    #[test]
    fn normalization_inverts(counts in prop::collection::vec(0u64..100_000, 1..50), pop in 1e5f64..1e8) {
        let d0 = date("2020-03-01");
        let dates = (0..counts.len()).map(|k| d0 + chrono::Days::new(k as u64)).collect();
        let s = ObservationSeries::new("x", dates, counts.clone(), pop).unwrap();
        for (y, c) in s.y.iter().zip(&counts) {
            prop_assert_eq!((y * pop).round() as u64, *c);
        }
    }
}
