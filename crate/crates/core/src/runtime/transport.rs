//! Point-to-point links between the manager and each logical worker.
//!
//! Receiving always happens on crossbeam channels. The in-process transport
//! sends straight into them; the socket transport writes frames to a
//! loopback TCP connection whose far end has a reader thread feeding the
//! same kind of channel, so callers cannot tell the two apart.

use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::thread;

use crossbeam_channel::{unbounded, Receiver, Sender};
use log::debug;

use super::config::TransportKind;
use super::wire::{read_magic, write_magic, Frame};
use crate::error::{Error, Result};

pub trait FrameSender: Send {
    fn send(&mut self, frame: Frame) -> Result<()>;
}

struct ChannelSender(Sender<Frame>);

impl FrameSender for ChannelSender {
    fn send(&mut self, frame: Frame) -> Result<()> {
        self.0
            .send(frame)
            .map_err(|_| Error::Protocol("peer hung up".into()))
    }
}

struct SocketSender(BufWriter<TcpStream>);

impl FrameSender for SocketSender {
    fn send(&mut self, frame: Frame) -> Result<()> {
        frame.write_to(&mut self.0).map_err(Error::from)
    }
}

/// All links of one run.
pub struct Links {
    /// Manager-side senders, indexed by worker.
    pub to_workers: Vec<Box<dyn FrameSender>>,
    /// Everything the workers send to the manager, merged.
    pub manager_inbox: Receiver<Frame>,
    /// Worker-side senders, indexed by worker. Taken by whoever runs the
    /// workers.
    pub to_manager: Vec<Option<Box<dyn FrameSender>>>,
    streams: Vec<TcpStream>,
}

impl Links {
    /// Connect the manager to `worker_inboxes.len()` workers. Frames for
    /// worker `k` arrive on `worker_inboxes[k]`; several workers may share a
    /// channel since frames carry the subset id.
    pub fn connect(kind: TransportKind, worker_inboxes: Vec<Sender<Frame>>) -> Result<Links> {
        let (inbox_tx, manager_inbox) = unbounded();
        match kind {
            TransportKind::InProcess => {
                let n = worker_inboxes.len();
                Ok(Links {
                    to_workers: worker_inboxes
                        .into_iter()
                        .map(|tx| Box::new(ChannelSender(tx)) as Box<dyn FrameSender>)
                        .collect(),
                    manager_inbox,
                    to_manager: (0..n)
                        .map(|_| {
                            Some(Box::new(ChannelSender(inbox_tx.clone())) as Box<dyn FrameSender>)
                        })
                        .collect(),
                    streams: Vec::new(),
                })
            }
            TransportKind::Socket => {
                let mut links = Links {
                    to_workers: Vec::new(),
                    manager_inbox,
                    to_manager: Vec::new(),
                    streams: Vec::new(),
                };
                for (k, worker_tx) in worker_inboxes.into_iter().enumerate() {
                    let (manager_end, worker_end) = socket_pair()?;
                    spawn_reader(k, "manager", manager_end.try_clone()?, inbox_tx.clone());
                    spawn_reader(k, "worker", worker_end.try_clone()?, worker_tx);
                    links.streams.push(manager_end.try_clone()?);
                    links.streams.push(worker_end.try_clone()?);
                    links
                        .to_workers
                        .push(Box::new(SocketSender(BufWriter::new(manager_end))));
                    links
                        .to_manager
                        .push(Some(Box::new(SocketSender(BufWriter::new(worker_end)))));
                }
                Ok(links)
            }
        }
    }

    pub fn take_worker_sender(&mut self, k: usize) -> Result<Box<dyn FrameSender>> {
        self.to_manager
            .get_mut(k)
            .and_then(Option::take)
            .ok_or_else(|| Error::Protocol(format!("worker link {k} already taken")))
    }
}

impl Drop for Links {
    fn drop(&mut self) {
        for s in &self.streams {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// A connected loopback pair, both ends past the handshake.
fn socket_pair() -> Result<(TcpStream, TcpStream)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let mut client = TcpStream::connect(addr)?;
    let (mut server, _) = listener.accept()?;
    for s in [&mut client, &mut server] {
        s.set_nodelay(true)?;
        write_magic(s)?;
    }
    read_magic(&mut client)?;
    read_magic(&mut server)?;
    Ok((server, client))
}

fn spawn_reader(k: usize, side: &'static str, stream: TcpStream, tx: Sender<Frame>) {
    thread::Builder::new()
        .name(format!("dem-{side}-reader-{k}"))
        .spawn(move || {
            let mut r = BufReader::new(stream);
            loop {
                match Frame::read_from(&mut r) {
                    Ok(Some(frame)) => {
                        if tx.send(frame).is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        debug!("{side} reader {k} stopped: {e}");
                        break;
                    }
                }
            }
        })
        .expect("spawn socket reader thread");
}
