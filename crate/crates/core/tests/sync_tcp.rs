use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use uuid::Uuid;
use woz_harness::analyzer::AnnotationFilter;
use woz_harness::harness::link::LinkDriver;
use woz_harness::harness::{AnnotationRequest, Engine};
use woz_harness::ids::SeededIds;
use woz_harness::server::sync::{connect, listen};
use woz_harness::session::{AnnotationKind, Origin, Role};
use woz_harness::sim;
use woz_harness::time::{Clock, SystemClock};

fn engine(dir: &std::path::Path, seed: u64, role: Role, instance: &str) -> (Arc<Mutex<Engine>>, Uuid) {
    let mut e = Engine::open(dir, Box::new(SeededIds::new(seed))).unwrap();
    let session = e.create_session(sim::default_setup(role, instance), SystemClock.now()).unwrap();
    sim::prepare_session(&mut e, session).unwrap();
    (Arc::new(Mutex::new(e)), session)
}

async fn wait_for(what: &str, mut done: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while !done() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

fn request(kind: AnnotationKind, note: &str) -> AnnotationRequest {
    AnnotationRequest { kind: Some(kind), note: note.into(), ..Default::default() }
}

#[tokio::test(flavor = "multi_thread")]
async fn observer_follows_the_wizard_and_both_end_with_one_log() {
    let (wd, od) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (wizard, wizard_session) = engine(wd.path(), 1, Role::Wizard, "wizard");
    let (observer, _) = engine(od.path(), 2, Role::Observer, "observer");
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);

    let mut feed = wizard.lock().unwrap().subscribe();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let w = wizard.clone();
    let server = tokio::spawn(listen(listener, w, clock.clone(), move || LinkDriver::new("wizard", Role::Wizard, Some(wizard_session))));
    let client = tokio::spawn(connect(addr, observer.clone(), clock.clone(), LinkDriver::new("observer", Role::Observer, None)));

    let connected = tokio::time::timeout(Duration::from_secs(10), async {
        while let Some(ev) = feed.recv().await {
            if ev.kind == "peer_connected" {
                return;
            }
        }
    })
    .await;
    assert!(connected.is_ok(), "peers never connected");

    let req = sim::start_request(&sim::SimScript::mind_the_tap(1));
    let run_id = wizard.lock().unwrap().start_pilot(wizard_session, &req, clock.now(), None).unwrap().id;
    wait_for("observer to follow into the run", || observer.lock().unwrap().run(run_id).is_ok_and(|r| r.is_running())).await;

    wizard.lock().unwrap().record(run_id, request(AnnotationKind::Correct, "wizard tap"), clock.now()).unwrap();
    observer.lock().unwrap().record(run_id, request(AnnotationKind::Note, "observer saw it"), clock.now()).unwrap();
    let has = |e: &Arc<Mutex<Engine>>, note: &str, origin: Origin| {
        e.lock().unwrap().run(run_id).is_ok_and(|r| r.annotations().iter().any(|a| a.note == note && a.origin == origin))
    };
    wait_for("the wizard tap on the observer", || has(&observer, "wizard tap", Origin::Remote)).await;
    wait_for("the observer note on the wizard", || has(&wizard, "observer saw it", Origin::Remote)).await;

    wizard.lock().unwrap().stop_run(run_id, clock.now()).unwrap();
    let export = |e: &Arc<Mutex<Engine>>| e.lock().unwrap().export_csv(run_id, &AnnotationFilter::default()).ok();
    wait_for("both logs to converge", || {
        observer.lock().unwrap().run(run_id).is_ok_and(|r| !r.is_running()) && export(&wizard).is_some() && export(&wizard) == export(&observer)
    })
    .await;
    let csv = export(&wizard).unwrap();
    assert!(csv.contains("wizard tap") && csv.contains("observer saw it"));
    assert_eq!(wizard.lock().unwrap().run(run_id).unwrap().stats(), observer.lock().unwrap().run(run_id).unwrap().stats());

    server.abort();
    client.abort();
}
