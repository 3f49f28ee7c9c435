//! install / remove / start / status / stop against an installation root.
//!
//! ```text
//! <root>/installed.json      manifest
//! <root>/bin/taxon-<ver>     service bundle
//! <root>/config/taxon.toml   default config
//! <root>/data/               stores, kept by `remove` unless --purge
//! <root>/run/<svc>.pid|port  runtime state
//! <root>/logs/<svc>.log
//! ```

use std::fs::{self, File, OpenOptions};
use std::os::unix::fs::PermissionsExt;
use std::os::unix::io::AsRawFd;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use taxon_service::fetch::{fetch_bytes, FetchLimits};
use taxon_service::{ServiceConfig, ServiceKind};

use crate::exit::{Exit, Failure};

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    fn manifest(&self) -> PathBuf {
        self.root.join("installed.json")
    }

    pub fn config_file(&self) -> PathBuf {
        self.root.join("config").join("taxon.toml")
    }

    fn bin_dir(&self) -> PathBuf {
        self.root.join("bin")
    }

    fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    fn run_dir(&self) -> PathBuf {
        self.root.join("run")
    }

    fn log_dir(&self) -> PathBuf {
        self.root.join("logs")
    }

    fn pid_file(&self, s: ServiceKind) -> PathBuf {
        self.run_dir().join(format!("{}.pid", s.name()))
    }

    fn port_file(&self, s: ServiceKind) -> PathBuf {
        self.run_dir().join(format!("{}.port", s.name()))
    }

    fn log_file(&self, s: ServiceKind) -> PathBuf {
        self.log_dir().join(format!("{}.log", s.name()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    installed_at: DateTime<Utc>,
    source: String,
    /// Relative to the root.
    binary: String,
}

fn read_manifest(layout: &Layout) -> Result<Manifest, Failure> {
    let path = layout.manifest();
    let text = match fs::read(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Failure::new(
                Exit::NotInstalled,
                format!("not installed at {}", layout.root.display()),
            ))
        }
        Err(e) => return Err(Failure::generic(format!("{}: {e}", path.display()))),
    };
    serde_json::from_slice(&text).map_err(|e| Failure::generic(format!("{}: {e}", path.display())))
}

/// Advisory lock on the root, held until dropped.
struct RootLock(#[allow(dead_code)] File);

fn lock(layout: &Layout) -> Result<RootLock, Failure> {
    fs::create_dir_all(&layout.root)
        .map_err(|e| Failure::generic(format!("{}: {e}", layout.root.display())))?;
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(layout.root.join(".lock"))
        .map_err(Failure::generic)?;
    // SAFETY: flock on a descriptor we own.
    let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
    if rc != 0 {
        return Err(Failure::new(
            Exit::LockBusy,
            format!(
                "another taxon command holds the lock on {}",
                layout.root.display()
            ),
        ));
    }
    Ok(RootLock(file))
}

/// True when `pid` is a live, non-zombie process.
fn alive(pid: i32) -> bool {
    // SAFETY: signal 0 only checks for existence.
    if pid <= 0 || unsafe { libc::kill(pid, 0) } != 0 {
        return false;
    }
    match fs::read_to_string(format!("/proc/{pid}/stat")) {
        // The state follows the parenthesized command name.
        Ok(stat) => stat
            .rsplit_once(')')
            .is_none_or(|(_, rest)| !rest.trim_start().starts_with('Z')),
        Err(_) => !Path::new("/proc/self").exists(),
    }
}

fn read_pid(layout: &Layout, s: ServiceKind) -> Option<i32> {
    fs::read_to_string(layout.pid_file(s))
        .ok()?
        .trim()
        .parse()
        .ok()
}

fn running_pid(layout: &Layout, s: ServiceKind) -> Option<i32> {
    read_pid(layout, s).filter(|&p| alive(p))
}

fn clear_runtime(layout: &Layout, s: ServiceKind) {
    let _ = fs::remove_file(layout.pid_file(s));
    let _ = fs::remove_file(layout.port_file(s));
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::generic(format!("{}: {e}", path.display()))
}

fn bundle_version(binary: &Path) -> Result<String, Failure> {
    let out = Command::new(binary)
        .arg("--version")
        .output()
        .map_err(|e| Failure::generic(format!("{} is not runnable: {e}", binary.display())))?;
    let text = String::from_utf8_lossy(&out.stdout);
    match text.trim().strip_prefix("taxon ") {
        Some(v) if out.status.success() => Ok(v.to_owned()),
        _ => Err(Failure::generic(format!(
            "{} is not a taxon bundle",
            binary.display()
        ))),
    }
}

pub fn install(root: &Path, source: Option<&str>) -> Result<(), Failure> {
    let layout = Layout::new(root);
    let _lock = lock(&layout)?;
    if let Ok(m) = read_manifest(&layout) {
        return Err(Failure::new(
            Exit::AlreadyInstalled,
            format!(
                "taxon {} is already installed at {}",
                m.version,
                root.display()
            ),
        ));
    }
    let (bytes, origin) = match source {
        None => {
            let exe = std::env::current_exe().map_err(Failure::generic)?;
            (
                fs::read(&exe).map_err(io_err(&exe))?,
                exe.display().to_string(),
            )
        }
        Some(src) => {
            let limits = FetchLimits {
                max_bytes: 1 << 30,
                timeout: Duration::from_secs(300),
            };
            (
                fetch_bytes(src, limits).map_err(Failure::generic)?,
                src.to_owned(),
            )
        }
    };
    let bin_dir = layout.bin_dir();
    fs::create_dir_all(&bin_dir).map_err(io_err(&bin_dir))?;
    let staged = bin_dir.join(".taxon.partial");
    fs::write(&staged, &bytes).map_err(io_err(&staged))?;
    fs::set_permissions(&staged, fs::Permissions::from_mode(0o755)).map_err(io_err(&staged))?;
    let version = match bundle_version(&staged) {
        Ok(v) => v,
        Err(e) => {
            let _ = fs::remove_file(&staged);
            return Err(e);
        }
    };
    let binary = format!("bin/taxon-{version}");
    fs::rename(&staged, root.join(&binary)).map_err(io_err(&staged))?;

    for dir in [layout.data_dir(), layout.run_dir(), layout.log_dir()] {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let config = layout.config_file();
    if !config.exists() {
        let mut cfg = ServiceConfig::default();
        cfg.server.data_dir = layout.data_dir().display().to_string();
        fs::create_dir_all(config.parent().unwrap()).map_err(io_err(&config))?;
        fs::write(&config, cfg.to_toml()).map_err(io_err(&config))?;
    }
    let manifest = Manifest {
        version: version.clone(),
        installed_at: Utc::now(),
        source: origin,
        binary,
    };
    let path = layout.manifest();
    fs::write(
        &path,
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(io_err(&path))?;
    println!("installed taxon {version} at {}", root.display());
    Ok(())
}

const ALL: [ServiceKind; 2] = [ServiceKind::Train, ServiceKind::Classify];

pub fn remove(root: &Path, purge: bool) -> Result<(), Failure> {
    let layout = Layout::new(root);
    let _lock = lock(&layout)?;
    read_manifest(&layout)?;
    let running: Vec<&str> = ALL
        .iter()
        .filter(|&&s| running_pid(&layout, s).is_some())
        .map(|s| s.name())
        .collect();
    if !running.is_empty() {
        return Err(Failure::new(
            Exit::StillRunning,
            format!("stop running services first: {}", running.join(", ")),
        ));
    }
    for dir in [
        layout.bin_dir(),
        layout.run_dir(),
        layout.log_dir(),
        layout.root.join("config"),
    ] {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
    }
    fs::remove_file(layout.manifest()).map_err(io_err(&layout.manifest()))?;
    if purge {
        let data = layout.data_dir();
        if data.exists() {
            fs::remove_dir_all(&data).map_err(io_err(&data))?;
        }
        println!("removed taxon and its data from {}", root.display());
    } else {
        println!(
            "removed taxon from {} (data kept in {})",
            root.display(),
            layout.data_dir().display()
        );
    }
    Ok(())
}

fn health_host(bind: &str) -> &str {
    match bind {
        "0.0.0.0" | "::" | "[::]" => "127.0.0.1",
        other => other,
    }
}

fn health(bind: &str, port: u16, timeout: Duration) -> Option<serde_json::Value> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let url = format!("http://{}:{port}/api/v1/health", health_host(bind));
    let mut resp = agent.get(&url).call().ok()?;
    if resp.status() != 200 {
        return None;
    }
    resp.body_mut().read_json().ok()
}

fn log_tail(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(10)..].join("\n")
}

fn terminate(pid: i32, signal: i32) {
    // SAFETY: plain kill(2).
    unsafe {
        libc::kill(pid, signal);
    }
}

fn wait_gone(pid: i32, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if !alive(pid) {
            return true;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    !alive(pid)
}

pub fn start(
    root: &Path,
    services: &[ServiceKind],
    cfg: &ServiceConfig,
    sets: &[String],
    config_path: Option<&Path>,
    timeout: Duration,
) -> Result<(), Failure> {
    let layout = Layout::new(root);
    let _lock = lock(&layout)?;
    let manifest = read_manifest(&layout)?;
    for &s in services {
        if let Some(pid) = running_pid(&layout, s) {
            return Err(Failure::new(
                Exit::AlreadyRunning,
                format!("{} is already running (pid {pid})", s.name()),
            ));
        }
    }
    let binary = root.join(&manifest.binary);
    let config = config_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| layout.config_file());
    for dir in [layout.run_dir(), layout.log_dir()] {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }

    let mut started = Vec::new();
    for &s in services {
        clear_runtime(&layout, s);
        let log_path = layout.log_file(s);
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        let mut cmd = Command::new(&binary);
        cmd.arg("serve")
            .arg(s.name())
            .arg("--port-file")
            .arg(layout.port_file(s))
            .current_dir(root)
            .env("TAXON_HOME", root)
            .env_remove("TAXON_CONFIG")
            .stdin(Stdio::null())
            .stdout(log.try_clone().map_err(Failure::generic)?)
            .stderr(log);
        if config.is_file() {
            cmd.arg("--config").arg(&config);
        }
        for set in sets {
            cmd.arg("--set").arg(set);
        }
        // SAFETY: setsid is async-signal-safe; detaches from our session.
        unsafe {
            cmd.pre_exec(|| {
                libc::setsid();
                Ok(())
            });
        }
        let child = cmd
            .spawn()
            .map_err(|e| Failure::generic(format!("spawn {}: {e}", binary.display())))?;
        let pid = child.id() as i32;
        let pid_file = layout.pid_file(s);
        fs::write(&pid_file, format!("{pid}\n")).map_err(io_err(&pid_file))?;
        started.push((s, child));
    }

    let deadline = Instant::now() + timeout;
    let mut failure = None;
    'wait: for (s, child) in &mut started {
        loop {
            if let Ok(Some(status)) = child.try_wait() {
                failure = Some(format!(
                    "{} exited during startup ({status})\n{}",
                    s.name(),
                    log_tail(&layout.log_file(*s))
                ));
                break 'wait;
            }
            let port = fs::read_to_string(layout.port_file(*s))
                .ok()
                .and_then(|p| p.trim().parse::<u16>().ok());
            if let Some(h) = port.and_then(|p| health(&cfg.server.bind, p, Duration::from_secs(2)))
            {
                println!(
                    "{}: running (version {}, pid {}, port {})",
                    s.name(),
                    h["version"].as_str().unwrap_or("?"),
                    child.id(),
                    port.unwrap()
                );
                break;
            }
            if Instant::now() >= deadline {
                failure = Some(format!(
                    "{} did not report healthy within {}s\n{}",
                    s.name(),
                    timeout.as_secs(),
                    log_tail(&layout.log_file(*s))
                ));
                break 'wait;
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }
    if let Some(msg) = failure {
        for (s, mut child) in started {
            terminate(child.id() as i32, libc::SIGTERM);
            if !wait_gone(child.id() as i32, Duration::from_secs(5)) {
                let _ = child.kill();
            }
            let _ = child.wait();
            clear_runtime(&layout, s);
        }
        return Err(Failure::new(Exit::HealthTimeout, msg));
    }
    Ok(())
}

pub fn status(root: &Path, services: &[ServiceKind]) -> Result<(), Failure> {
    let layout = Layout::new(root);
    let manifest = match read_manifest(&layout) {
        Ok(m) => m,
        Err(f) if f.code == Exit::NotInstalled => {
            println!("not-installed");
            return Err(Failure::new(Exit::NotInstalled, ""));
        }
        Err(f) => return Err(f),
    };
    println!(
        "installed: taxon {} at {}",
        manifest.version,
        root.display()
    );
    let bind = fs::read_to_string(layout.config_file())
        .ok()
        .and_then(|t| ServiceConfig::resolve(Some(&t), &[]).ok())
        .map(|c| c.server.bind)
        .unwrap_or_else(|| "127.0.0.1".into());
    for &s in services {
        match running_pid(&layout, s) {
            None => println!("{}: stopped", s.name()),
            Some(pid) => {
                let port = fs::read_to_string(layout.port_file(s))
                    .ok()
                    .and_then(|p| p.trim().parse::<u16>().ok());
                match port.and_then(|p| health(&bind, p, Duration::from_secs(2))) {
                    Some(h) => println!(
                        "{}: running (version {}, pid {pid}, port {}, uptime {:.0}s)",
                        s.name(),
                        h["version"].as_str().unwrap_or("?"),
                        port.unwrap(),
                        h["uptime_s"].as_f64().unwrap_or(0.0)
                    ),
                    None => println!("{}: running (pid {pid}, not responding)", s.name()),
                }
            }
        }
    }
    Ok(())
}

pub fn stop(root: &Path, services: &[ServiceKind]) -> Result<(), Failure> {
    let layout = Layout::new(root);
    read_manifest(&layout)?;
    let _lock = lock(&layout)?;
    let drain = fs::read_to_string(layout.config_file())
        .ok()
        .and_then(|t| ServiceConfig::resolve(Some(&t), &[]).ok())
        .map_or(30, |c| c.server.drain_timeout_s);
    let grace = Duration::from_secs(drain + 5);
    let mut stopped = 0;
    let mut forced = Vec::new();
    for &s in services {
        let Some(pid) = running_pid(&layout, s) else {
            clear_runtime(&layout, s);
            continue;
        };
        terminate(pid, libc::SIGTERM);
        if !wait_gone(pid, grace) {
            terminate(pid, libc::SIGKILL);
            wait_gone(pid, Duration::from_secs(5));
            forced.push(s.name());
        }
        clear_runtime(&layout, s);
        stopped += 1;
        println!("{}: stopped", s.name());
    }
    if !forced.is_empty() {
        return Err(Failure::generic(format!(
            "killed after the {}s drain window: {}",
            grace.as_secs(),
            forced.join(", ")
        )));
    }
    if stopped == 0 {
        return Err(Failure::new(
            Exit::NotRunning,
            "nothing to stop: no service is running",
        ));
    }
    Ok(())
}
