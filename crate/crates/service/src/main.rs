use std::sync::Arc;

use dope_service::{router, ServiceConfig, Store};

#[tokio::main]
async fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = match ServiceConfig::from_env() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("dope-service: {e}");
            std::process::exit(2);
        }
    };
    if let Some(n) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global thread pool is configured once");
    }
    let (store, failures) = Store::open(&cfg.data_dir).unwrap_or_else(|e| {
        eprintln!("dope-service: cannot open {}: {e}", cfg.data_dir.display());
        std::process::exit(1);
    });
    if !failures.is_empty() {
        log::warn!("{} session logs could not be replayed", failures.len());
    }
    let listener = tokio::net::TcpListener::bind(cfg.bind_addr).await.unwrap_or_else(|e| {
        eprintln!("dope-service: cannot bind {}: {e}", cfg.bind_addr);
        std::process::exit(1);
    });
    log::info!("listening on {}", listener.local_addr().expect("bound"));
    axum::serve(listener, router(Arc::new(store)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .expect("server runs");
}
